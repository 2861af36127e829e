//! Bag-of-tricks request planning.
//!
//! A plan is the ordered list of [`GenerationRequest`]s for one task and
//! trick composition. Expansion is pure: the same task, trick and master
//! seed always produce the same plan, byte for byte, so a plan can be
//! written to disk and audited before any image is generated.

mod plan_file;
mod request;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::task::{
    composition_for, ClassificationTask, DomainCatalog, DomainStyle, TrickKind, TrickWeight,
};

pub use plan_file::{read_plan, write_plan, PlanFileError, PlanHeader};
pub use request::{
    GenerationRequest, PlanRng, DEFAULT_DDIM_STEPS, DEFAULT_GENERATION_SIDE,
    DEFAULT_GUIDANCE_SCALE, RANDOM_GUIDANCE_MAX, RANDOM_GUIDANCE_MIN,
};
pub(crate) use request::SeedAllocator;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("multi_domain prompts need a domain")]
    MissingDomain,
    #[error("domain {domain:?} is not in the {style:?} catalog")]
    UnknownDomain { domain: String, style: DomainStyle },
    #[error("trick {0} does not take a domain")]
    UnexpectedDomain(TrickKind),
    #[error("trick {0} must be resolved into elementary tricks before expansion")]
    UnresolvedTrick(TrickKind),
}

/// Render the prompt for one class under one trick. Class labels are
/// substituted verbatim.
pub fn render_prompt(
    trick: TrickKind,
    class_label: &str,
    domain: Option<&str>,
    satellite: bool,
) -> Result<String, PromptError> {
    match (trick, domain) {
        (TrickKind::MultiDomain, None) => Err(PromptError::MissingDomain),
        (TrickKind::MultiDomain, Some(domain)) => {
            let style = if satellite {
                DomainStyle::Satellite
            } else {
                DomainStyle::GenericObjects
            };
            if !DomainCatalog::for_style(style).contains(domain) {
                return Err(PromptError::UnknownDomain {
                    domain: domain.to_string(),
                    style,
                });
            }
            Ok(if satellite {
                format!("a satellite photo of a {class_label} in the style of a {domain}")
            } else {
                format!("a {domain} of a {class_label}")
            })
        }
        (TrickKind::AllCombined | TrickKind::BestTricks, _) => {
            Err(PromptError::UnresolvedTrick(trick))
        }
        (t, Some(_)) => Err(PromptError::UnexpectedDomain(t)),
        (TrickKind::BaseClass | TrickKind::RandomGuidance, None) => {
            Ok(format!("an image of a {class_label}"))
        }
        (TrickKind::ClassPrompt, None) => Ok(class_label.to_string()),
    }
}

/// Guidance scale for the random-guidance trick: continuous uniform on [1, 5].
pub fn sample_guidance(rng: &mut PlanRng) -> f64 {
    rng.uniform(RANDOM_GUIDANCE_MIN, RANDOM_GUIDANCE_MAX)
}

/// Knobs shared by every request of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandOptions {
    pub default_guidance: f64,
    pub ddim_steps: u32,
    pub generation_width: u32,
    pub generation_height: u32,
    /// Multi-domain requests at the same round share one seed across all
    /// domains.
    pub seed_share_mode: bool,
    /// Overrides the task's style catalog when set.
    pub catalog: Option<DomainCatalog>,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        Self {
            default_guidance: DEFAULT_GUIDANCE_SCALE,
            ddim_steps: DEFAULT_DDIM_STEPS,
            generation_width: DEFAULT_GENERATION_SIDE,
            generation_height: DEFAULT_GENERATION_SIDE,
            seed_share_mode: false,
            catalog: None,
        }
    }
}

/// Expand one trick into its request plan.
///
/// Elementary tricks give `per_class_count` requests per class.
/// `AllCombined` concatenates the four elementary plans (base class, class
/// prompt, multi-domain, random guidance) and renumbers request ids.
/// `BestTricks` must be resolved first (see [`expand_composition`]).
pub fn expand(
    task: &ClassificationTask,
    trick: TrickKind,
    rng: &PlanRng,
    options: &ExpandOptions,
) -> Result<Vec<GenerationRequest>, PromptError> {
    match trick {
        TrickKind::BestTricks => Err(PromptError::UnresolvedTrick(trick)),
        TrickKind::AllCombined => {
            expand_composition(task, &composition_for(trick, &task.name, None), rng, options)
        }
        t => expand_composition(task, &[TrickWeight::new(t, 1)], rng, options),
    }
}

/// Expand an already-resolved composition of elementary tricks, in order.
pub fn expand_composition(
    task: &ClassificationTask,
    parts: &[TrickWeight],
    rng: &PlanRng,
    options: &ExpandOptions,
) -> Result<Vec<GenerationRequest>, PromptError> {
    let catalog = options
        .catalog
        .clone()
        .unwrap_or_else(|| DomainCatalog::for_style(task.style));
    let mut seeds = SeedAllocator::default();
    let mut plan = Vec::new();
    for part in parts {
        if !part.trick.is_elementary() {
            return Err(PromptError::UnresolvedTrick(part.trick));
        }
        let mut trick_rng = rng.fork(part.trick);
        let count = task.per_class_count as u64 * part.multiplier as u64;
        expand_elementary(
            task,
            part.trick,
            count,
            &catalog,
            &mut trick_rng,
            &mut seeds,
            options,
            &mut plan,
        )?;
    }
    for (id, req) in plan.iter_mut().enumerate() {
        req.request_id = id as u64;
    }
    Ok(plan)
}

#[allow(clippy::too_many_arguments)]
fn expand_elementary(
    task: &ClassificationTask,
    trick: TrickKind,
    count: u64,
    catalog: &DomainCatalog,
    rng: &mut PlanRng,
    seeds: &mut SeedAllocator,
    options: &ExpandOptions,
    out: &mut Vec<GenerationRequest>,
) -> Result<(), PromptError> {
    let satellite = catalog.style == DomainStyle::Satellite;
    let n_domains = catalog.len().max(1) as u64;
    let share = trick == TrickKind::MultiDomain && options.seed_share_mode;
    let seed_span = if share {
        count.div_ceil(n_domains)
    } else {
        count
    };
    for (class_index, label) in task.class_labels.iter().enumerate() {
        let base = seeds.reserve(rng, label, seed_span);
        for i in 0..count {
            let domain = (trick == TrickKind::MultiDomain)
                .then(|| catalog.domains[(i % n_domains) as usize].clone());
            let offset = if share { i / n_domains } else { i };
            let guidance_scale = if trick == TrickKind::RandomGuidance {
                sample_guidance(rng)
            } else {
                options.default_guidance
            };
            out.push(GenerationRequest {
                request_id: out.len() as u64,
                class_index,
                class_label: label.clone(),
                trick,
                prompt: render_prompt(trick, label, domain.as_deref(), satellite)?,
                seed: base + offset,
                guidance_scale,
                domain,
                ddim_steps: options.ddim_steps,
                width: options.generation_width,
                height: options.generation_height,
                conditioning_embedding: None,
            });
        }
    }
    Ok(())
}

/// Request counts of a plan grouped three ways, for dry-run reporting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PlanSummary {
    pub total: usize,
    pub per_class: BTreeMap<String, usize>,
    pub per_trick: BTreeMap<String, usize>,
    pub per_domain: BTreeMap<String, usize>,
}

impl PlanSummary {
    pub fn of(plan: &[GenerationRequest]) -> Self {
        let mut s = PlanSummary {
            total: plan.len(),
            ..Default::default()
        };
        for r in plan {
            *s.per_class.entry(r.class_label.clone()).or_default() += 1;
            *s.per_trick.entry(r.trick.to_string()).or_default() += 1;
            if let Some(d) = &r.domain {
                *s.per_domain.entry(d.clone()).or_default() += 1;
            }
        }
        s
    }

    /// e.g. `200000 requests, 10 classes, 4 tricks`
    pub fn headline(&self) -> String {
        format!(
            "{} requests, {} classes, {} tricks",
            self.total,
            self.per_class.len(),
            self.per_trick.len()
        )
    }
}
