#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rcerm::queue::QueueStore;
use rcerm::Tensor;

pub const DIM: usize = 3;

fn embedding(id: usize) -> Vec<f64> {
    let a = id as f64 * 0.001;
    vec![a.cos(), a.sin(), 0.0]
}

#[derive(Clone, Debug)]
pub struct Op {
    pub class: usize,
    pub domain: usize,
    pub rows: usize,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub classes: usize,
    pub domains: usize,
    pub cap: usize,
    pub ops: Vec<Op>,
}

pub fn scenario() -> impl Strategy<Value = Scenario> {
    (1usize..4, 1usize..4, 1usize..6).prop_flat_map(|(classes, domains, cap)| {
        let op = (0..classes, 0..domains, 0..=2 * cap).prop_map(|(class, domain, rows)| Op {
            class,
            domain,
            rows,
        });
        prop::collection::vec(op, 0..40).prop_map(move |ops| Scenario {
            classes,
            domains,
            cap,
            ops,
        })
    })
}

/// Replays `s` against a plain list of everything enqueued per cell and
/// checks capacity, FIFO suffix and pool composition after every step.
pub fn check_queue_laws(s: &Scenario) -> Result<(), TestCaseError> {
    let (classes, domains, cap) = (s.classes, s.domains, s.cap);
    let mut store = QueueStore::new(classes, domains, DIM, cap).unwrap();
    let mut history: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes * domains];
    let mut next_id = 0;
    for op in &s.ops {
        let rows: Vec<Vec<f64>> = (0..op.rows).map(|i| embedding(next_id + i)).collect();
        next_id += op.rows;
        let batch = if rows.is_empty() {
            Tensor::zeros(&[0, DIM])
        } else {
            Tensor::from_rows(&rows).unwrap()
        };
        store.enqueue_dequeue(op.class, op.domain, &batch).unwrap();
        history[op.class * domains + op.domain].extend(rows);

        for c in 0..classes {
            for d in 0..domains {
                let q: Vec<Vec<f64>> = store.queue(c, d).unwrap().iter().cloned().collect();
                let h = &history[c * domains + d];
                prop_assert!(q.len() <= cap);
                prop_assert_eq!(q.len(), h.len().min(cap));
                prop_assert_eq!(&q[..], &h[h.len() - q.len()..]);
            }
        }

        for c in 0..classes {
            for d in 0..domains {
                let pos = store.positive_pool(c, d).unwrap();
                let neg = store.negative_pool(c, d).unwrap();
                prop_assert!(pos.provenance.iter().all(|&(pc, pd)| pc == c && pd != d));
                prop_assert!(neg.provenance.iter().all(|&(nc, _)| nc != c));
                prop_assert!(pos.provenance.iter().all(|p| !neg.provenance.contains(p)));
                let pos_len: usize = (0..domains)
                    .filter(|&o| o != d)
                    .map(|o| store.len(c, o).unwrap())
                    .sum();
                let neg_len: usize = (0..classes)
                    .filter(|&o| o != c)
                    .map(|o| (0..domains).map(|dd| store.len(o, dd).unwrap()).sum::<usize>())
                    .sum();
                prop_assert_eq!(pos.len(), pos_len);
                prop_assert_eq!(neg.len(), neg_len);
                prop_assert_eq!(pos.matrix.shape(), &[pos_len, DIM][..]);
                prop_assert_eq!(neg.matrix.shape(), &[neg_len, DIM][..]);
                let mut expect = Vec::new();
                for o in (0..domains).filter(|&o| o != d) {
                    for r in store.queue(c, o).unwrap() {
                        expect.extend_from_slice(r);
                    }
                }
                prop_assert_eq!(pos.matrix.data(), &expect[..]);
            }
        }
    }
    Ok(())
}
