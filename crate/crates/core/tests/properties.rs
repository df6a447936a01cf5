mod oracles;

use hilbert_core::config::{parse_config, RetryPolicy, RunBudget, SamplingSettings};
use hilbert_core::jobpool::{self, Mode, SimJob};
use hilbert_core::textops;
use hilbert_core::Config;
use proptest::prelude::*;

// Text with no comment, string or fence syntax, so that what it contains is
// exactly what a token scan sees.
fn plain() -> impl Strategy<Value = String> {
    "[a-z_ :=()\n]{0,80}"
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,8}"
}

proptest! {
    #[test]
    fn mask_keeps_bytes_and_lines(src in any::<String>()) {
        let m = textops::mask(&src);
        prop_assert_eq!(m.len(), src.len());
        let lines = |s: &str| s.match_indices('\n').map(|(i, _)| i).collect::<Vec<_>>();
        prop_assert_eq!(lines(&m), lines(&src));
    }

    #[test]
    fn sorry_in_comments_and_strings_is_ignored(t in plain()) {
        let base = textops::contains_sorry(&t);
        prop_assert_eq!(textops::contains_sorry(&format!("{t} -- sorry")), base);
        prop_assert_eq!(textops::contains_sorry(&format!("{t}\n/- sorry /- sorry -/ -/")), base);
        prop_assert_eq!(textops::contains_sorry(&format!("{t}\n#eval \"sorry\"")), base);
        let with_sorry = format!("{t}\n  sorry");
        prop_assert!(textops::contains_sorry(&with_sorry));
    }

    #[test]
    fn rename_round_trips(body in plain(), a in ident(), b in ident()) {
        prop_assume!(a != b && !body.contains(b.as_str()));
        let src = format!("theorem {a} : True := by\n  {body}\n  exact {a}");
        let there = textops::rename_identifier(&src, &a, &b);
        prop_assert!(!textops::mentions(&there, &a));
        prop_assert_eq!(textops::rename_identifier(&there, &b, &a), src);
    }

    #[test]
    fn fenced_code_comes_back(lines in prop::collection::vec("[ -_a-~]{1,30}", 1..8), prose in "[a-zA-Z .]{0,40}") {
        let code = lines.join("\n");
        prop_assume!(!code.contains('`') && !code.trim().is_empty());
        let reply = format!("{prose}\n```lean4\n{code}\n```\n{prose}");
        prop_assert_eq!(textops::last_lean_block(&reply), Some(code));
    }

    #[test]
    fn proof_lines_skip_blanks_and_comments(tactics in prop::collection::vec(0u8..3, 0..40)) {
        let mut src = String::from("theorem t (x : ℕ) : x = x := by\n");
        let mut want = 0;
        for kind in &tactics {
            match kind {
                0 => { src.push_str("  simp\n"); want += 1; }
                1 => src.push_str("\n"),
                _ => src.push_str("  -- note\n"),
            }
        }
        prop_assert_eq!(textops::count_proof_lines(&src), want);
    }

    #[test]
    fn concat_is_idempotent(parts in prop::collection::vec("[a-z \n]{0,20}", 0..5)) {
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        let once = textops::concat_sources(&refs);
        prop_assert_eq!(textops::concat_sources(&[&once]), once.clone());
        prop_assert!(once.ends_with('\n') && !once.ends_with("\n\n"));
    }

    #[test]
    fn config_round_trips(
        ks in prop::array::uniform13(0u32..1000),
        conc in 1u32..64,
        temps in (0.0f64..2.0, 0.0f64..2.0),
        retry in (1u32..10, 0u64..10_000),
    ) {
        let budget = RunBudget {
            k_initial_proof: ks[0],
            s_queries: ks[1],
            m_results: ks[2],
            k_sketch_attempts: ks[3],
            k_formal_proof: ks[4],
            k_proof_correction: ks[5],
            k_informal_passes: ks[6],
            k_max_shallow_len: ks[7],
            max_depth: ks[8],
            k_sketch_corrections: ks[9],
            k_theorem_corrections: ks[10],
            k_subgoal_corrections: ks[11],
            k_subgoal_error_corrections: ks[12],
            max_concurrency: conc,
        };
        let mut config = Config {
            budget,
            sampling: SamplingSettings {
                reasoner_temperature: temps.0,
                prover_temperature: temps.1,
                ..SamplingSettings::default()
            },
            retry: RetryPolicy {
                max_attempts: retry.0,
                base_backoff_ms: retry.1,
                ..RetryPolicy::default()
            },
            ..Config::default()
        };
        config.mock.script = Some("script.jsonl".into());
        config.backends.verifier.url = Some("http://localhost:8000".into());
        let back = parse_config(&config.to_toml()).unwrap();
        prop_assert_eq!(back, config);
    }

    #[test]
    fn simulator_obeys_pool_rules(
        durations in prop::collection::vec((0u64..10, any::<bool>()), 0..15),
        limit in 1usize..6,
        mode in prop::sample::select(oracles::MODES.to_vec()),
    ) {
        let jobs: Vec<SimJob> = durations.iter().map(|&(duration, succeeds)| SimJob { duration, succeeds }).collect();
        let out = jobpool::simulate(mode, &jobs, limit);
        prop_assert!(out.peak_running <= limit);
        let checked = oracles::check_pool_events(mode, &jobs, limit, &out.events, &out.cancelled);
        prop_assert!(checked.is_ok(), "{:?}", checked);
    }
}

#[test]
fn executor_matches_rules_on_200_scripts_per_mode() {
    oracles::pool_suite(200).unwrap();
}

#[test]
fn wait_all_with_one_slot_is_sequential() {
    let jobs: Vec<SimJob> = (1..=4).map(|d| SimJob { duration: d, succeeds: true }).collect();
    let out = jobpool::simulate(Mode::WaitAll, &jobs, 1);
    assert_eq!(out.makespan, 10);
    assert_eq!(out.peak_running, 1);
}

#[test]
fn retrieval_matches_exhaustive_scan() {
    let stats = oracles::retrieval_suite(7, 1000, 300, 100, 5).unwrap();
    assert!(stats.with_ties >= stats.queries / 4, "only {} queries had ties", stats.with_ties);
}

#[test]
fn retrieval_small_indexes_and_large_m() {
    for seed in 0..20 {
        let n = 1 + seed as usize * 3;
        oracles::retrieval_suite(seed, n, n / 3, 10, 1 + seed as usize % 8).unwrap();
    }
}

#[test]
fn prompt_goldens() {
    oracles::golden_suite().unwrap();
}
