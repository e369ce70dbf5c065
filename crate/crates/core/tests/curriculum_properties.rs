use std::collections::BTreeSet;

use proptest::prelude::*;
use staterank_core::curriculum::{build_plan, partition_by_domain, CurriculumPlan};

fn records(sizes: &[usize]) -> Vec<(String, String)> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(d, &n)| (0..n).map(move |i| (format!("{d}:{i}"), format!("dom{d}"))))
        .collect()
}

fn domain_of(id: &str) -> String {
    format!("dom{}", id.split(':').next().unwrap())
}

fn check(plan: &CurriculumPlan, k: usize, n: usize, b: usize) -> Result<(), TestCaseError> {
    let mut seen = BTreeSet::new();
    for step in &plan.steps {
        prop_assert_eq!(step.len(), n);
        for slot in step {
            prop_assert_eq!(slot.ids.len(), b);
            for id in &slot.ids {
                prop_assert_eq!(&domain_of(id), &slot.domain);
                prop_assert!(seen.insert(id.clone()), "duplicate {}", id);
            }
        }
        if k >= n {
            let doms: BTreeSet<&String> = step.iter().map(|s| &s.domain).collect();
            prop_assert_eq!(doms.len(), n);
        }
    }
    prop_assert_eq!(plan.flags.degenerate, k < n);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn plans_respect_domain_invariants(
        sizes in prop::collection::vec(2usize..40, 1..=16),
        n in 1usize..=8,
        b in 2usize..6,
        seed in any::<u64>(),
    ) {
        prop_assume!(sizes.iter().any(|&s| s >= b));
        let corpus = partition_by_domain(records(&sizes)).unwrap();
        let plan = build_plan(&corpus, n, b, seed).unwrap();
        check(&plan, sizes.len(), n, b)?;
        prop_assert_eq!(&plan, &build_plan(&corpus, n, b, seed).unwrap());
        let used: usize = plan.steps.iter().flatten().map(|s| s.ids.len()).sum();
        prop_assert_eq!(used + plan.flags.dropped, corpus.n_samples());
    }
}
