//! A scalar tri-level problem whose every loss evaluation is logged.

use factornas_core::optim::{OptimizerKind, SgdConfig};
use factornas_core::search::{SearchConfig, SearchMode, SearchProblem, Split};
use factornas_core::{Group, ParamStore, Result, Tensor};

/// `L_train = (ω − α − β)²`, `L_val = (ω − 1)² + (α − β)²`, every evaluation logged.
pub struct Toy {
    pub stores: [ParamStore; 3],
    pub log: Vec<(Split, Group, [f64; 3])>,
    pub constant: bool,
}

pub fn idx(g: Group) -> usize {
    match g {
        Group::Weights => 0,
        Group::Alpha => 1,
        Group::Beta => 2,
    }
}

impl Toy {
    pub fn new(w: f64, a: f64, b: f64) -> Self {
        let store = |name: &str, v: f64| {
            let mut s = ParamStore::new();
            s.add(name, Tensor::scalar(v));
            s
        };
        Toy { stores: [store("w", w), store("a", a), store("b", b)], log: Vec::new(), constant: false }
    }

    pub fn values(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.stores[i].entries()[0].value.item())
    }

    pub fn val_loss(&self) -> f64 {
        let [w, a, b] = self.values();
        (w - 1.0) * (w - 1.0) + (a - b) * (a - b)
    }
}

impl SearchProblem for Toy {
    type Batch = ();

    fn store(&self, group: Group) -> &ParamStore {
        &self.stores[idx(group)]
    }

    fn store_mut(&mut self, group: Group) -> &mut ParamStore {
        &mut self.stores[idx(group)]
    }

    fn loss_and_grad(&mut self, split: Split, _: &(), group: Group) -> Result<f64> {
        let [w, a, b] = self.values();
        self.log.push((split, group, [w, a, b]));
        let (loss, grads) = if self.constant {
            (3.0, [0.0; 3])
        } else {
            match split {
                Split::Train => {
                    let r = w - a - b;
                    (r * r, [2.0 * r, -2.0 * r, -2.0 * r])
                }
                Split::Val => (self.val_loss(), [2.0 * (w - 1.0), 2.0 * (a - b), -2.0 * (a - b)]),
            }
        };
        self.stores[idx(group)].entries_mut()[0].grad = vec![grads[idx(group)]];
        Ok(loss)
    }
}

pub fn plain_sgd(mode: SearchMode, arch_lr: f64) -> SearchConfig {
    SearchConfig {
        weights_optimizer: SgdConfig { momentum: 0.0, weight_decay: 0.0 },
        arch_optimizer: OptimizerKind::Sgd(SgdConfig { momentum: 0.0, weight_decay: 0.0 }),
        arch_lr,
        grad_clip: 0.0,
        mode,
        ..SearchConfig::default()
    }
}
