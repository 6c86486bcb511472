use std::collections::BTreeMap;

use super::init::diagonal_init;
use super::spec::{FreezeSpec, InitKind};
use super::FreezeError;
use crate::model::{Group, ParameterRegistry, TaggedParam};

/// Optimizer state that can drop the moments of a parameter.
pub trait MomentStore {
    fn discard(&mut self, name: &str);
}

/// Outcome of [`apply_freeze`]. Counts treat every entry as frozen,
/// including those scheduled for a later epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeReport {
    /// Names of every selected parameter, in registry order.
    pub affected: Vec<String>,
    /// Selected parameter count per group (every group present).
    pub per_group: BTreeMap<Group, usize>,
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
}

/// Re-initializes the selection of every entry as requested and freezes
/// the entries due at epoch 0. Applying the same spec twice has the same
/// effect as applying it once.
pub fn apply_freeze(
    registry: &mut ParameterRegistry,
    spec: &FreezeSpec,
) -> Result<FreezeReport, FreezeError> {
    let selected = spec.resolve(registry.as_slice())?;
    let mut hit = vec![false; registry.len()];
    for (entry, indices) in spec.entries().iter().zip(&selected) {
        for &i in indices {
            hit[i] = true;
            let p = registry.get_mut(i).expect("resolved index");
            let is_matrix = p.tag().role.is_some_and(|r| r.is_weight_matrix());
            if entry.init == InitKind::Diagonal && is_matrix {
                let diag = diagonal_init(p.shape())?;
                p.data_mut().copy_from_slice(diag.data());
            }
            if entry.at_epoch == 0 {
                p.set_trainable(false);
            }
        }
    }
    let mut per_group: BTreeMap<Group, usize> = Group::ALL.iter().map(|&g| (g, 0)).collect();
    let mut affected = Vec::new();
    let mut frozen = 0;
    for (p, _) in registry.iter().zip(&hit).filter(|(_, &h)| h) {
        *per_group.entry(p.tag().group).or_default() += p.numel();
        frozen += p.numel();
        affected.push(p.name().to_string());
    }
    let total = registry.total();
    Ok(FreezeReport {
        affected,
        per_group,
        total,
        trainable: total - frozen,
        ratio: (total - frozen) as f64 / total as f64,
    })
}

/// What [`freeze_at_epoch_hook`] did at one epoch boundary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HookReport {
    pub frozen: Vec<String>,
    pub warnings: Vec<String>,
}

/// Called at the start of epoch `current_epoch` (counting from 0, so it
/// follows `current_epoch` completed epochs). Entries due now stop training
/// and lose their optimizer moments. Entries whose epoch has already passed
/// but whose parameters still train are left alone with a warning.
pub fn freeze_at_epoch_hook(
    registry: &mut ParameterRegistry,
    spec: &FreezeSpec,
    current_epoch: usize,
    moments: &mut dyn MomentStore,
) -> Result<HookReport, FreezeError> {
    let selected = spec.resolve(registry.as_slice())?;
    let mut report = HookReport::default();
    for (entry, indices) in spec.entries().iter().zip(&selected) {
        if entry.at_epoch > current_epoch {
            continue;
        }
        let still_training = indices
            .iter()
            .any(|&i| registry.get(i).is_some_and(|p| p.trainable()));
        if entry.at_epoch < current_epoch {
            if still_training {
                report.warnings.push(format!(
                    "{entry}: epoch {} already passed (now at epoch {current_epoch}); not frozen",
                    entry.at_epoch
                ));
            }
            continue;
        }
        for &i in indices {
            let p = registry.get_mut(i).expect("resolved index");
            if p.trainable() {
                p.set_trainable(false);
                moments.discard(p.name());
                report.frozen.push(p.name().to_string());
            }
        }
    }
    Ok(report)
}
