use cellvta::metrics::{aji, dice_score, match_instances, pq};
use cellvta::types::InstanceMap;
use proptest::prelude::*;

fn map_strategy() -> impl Strategy<Value = InstanceMap> {
    (4usize..=16, 4usize..=16).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u32..=4, h * w).prop_map(move |ids| InstanceMap::new(h, w, ids).unwrap())
    })
}

fn pair_strategy() -> impl Strategy<Value = (InstanceMap, InstanceMap)> {
    map_strategy().prop_flat_map(|gt| {
        let (h, w) = (gt.height, gt.width);
        let n = h * w;
        (Just(gt), proptest::collection::vec(0u32..=4, n)).prop_map(move |(gt, ids)| (gt, InstanceMap::new(h, w, ids).unwrap()))
    })
}

fn permuted(map: &InstanceMap) -> InstanceMap {
    let ids = map.ids.iter().map(|&v| if v == 0 { 0 } else { 50 - v }).collect();
    InstanceMap::new(map.height, map.width, ids).unwrap()
}

proptest! {
    #[test]
    fn self_match_is_perfect(m in map_strategy()) {
        let v = pq(&match_instances(&m, &m).unwrap());
        prop_assert_eq!(v.pq, 1.0);
        prop_assert_eq!(aji(&m, &m).unwrap(), 1.0);
        prop_assert_eq!(dice_score(&m.foreground(), &m.foreground()).unwrap(), 1.0);
    }

    #[test]
    fn scores_are_bounded((gt, pred) in pair_strategy()) {
        let v = pq(&match_instances(&gt, &pred).unwrap());
        for s in [v.pq, v.dq, v.sq, aji(&gt, &pred).unwrap(), dice_score(&gt.foreground(), &pred.foreground()).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&s), "{}", s);
        }
        prop_assert!((v.pq - v.dq * v.sq).abs() < 1e-15);
    }

    #[test]
    fn pq_is_symmetric_and_label_invariant((gt, pred) in pair_strategy()) {
        let a = pq(&match_instances(&gt, &pred).unwrap());
        let b = pq(&match_instances(&pred, &gt).unwrap());
        let c = pq(&match_instances(&permuted(&gt), &permuted(&pred)).unwrap());
        prop_assert!((a.pq - b.pq).abs() < 1e-12);
        prop_assert!((a.pq - c.pq).abs() < 1e-12);
        let d1 = dice_score(&gt.foreground(), &pred.foreground()).unwrap();
        let d2 = dice_score(&pred.foreground(), &gt.foreground()).unwrap();
        prop_assert_eq!(d1, d2);
    }

    #[test]
    fn matching_is_one_to_one((gt, pred) in pair_strategy()) {
        let m = match_instances(&gt, &pred).unwrap();
        let mut gs: Vec<u32> = m.pairs.iter().map(|p| p.0).collect();
        let mut ps: Vec<u32> = m.pairs.iter().map(|p| p.1).collect();
        gs.dedup();
        ps.sort_unstable();
        ps.dedup();
        prop_assert_eq!(gs.len(), m.pairs.len());
        prop_assert_eq!(ps.len(), m.pairs.len());
        prop_assert!(m.pairs.iter().all(|p| p.2 > 0.5));
    }
}
