use scse_core::se::{self, SeVariant};
use scse_core::zoo::{self, ArchSpec};
use scse_core::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub spec: ArchSpec,
    pub vanilla: usize,
    /// `(block name, block width, SE weights)` for the eight SE sites.
    pub per_block: Vec<(String, usize, usize)>,
    pub overhead: usize,
}

impl ParamCount {
    pub fn percent(&self) -> f64 {
        100.0 * self.overhead as f64 / self.vanilla as f64
    }
}

pub fn count(spec: &ArchSpec) -> Result<ParamCount> {
    let vanilla = zoo::build_network(&spec.with_variant(SeVariant::None), 0)?.count_parameters();
    let levels = spec.block_channels.len();
    let per_block = spec
        .se_site_channels()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let name = if i < levels {
                format!("enc{i}")
            } else {
                format!("dec{}", i - levels)
            };
            se::se_param_count(spec.se_variant, c, spec.se_reduction).map(|n| (name, c, n))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamCount {
        spec: spec.clone(),
        vanilla,
        overhead: spec.se_overhead()?,
        per_block,
    })
}

pub fn render(p: &ParamCount) -> String {
    let mut out = String::new();
    out.push_str(&format!("architecture,{}\n", p.spec.kind));
    out.push_str(&format!("se_variant,{}\n", p.spec.se_variant));
    out.push_str(&format!("se_reduction,{}\n", p.spec.se_reduction));
    if let Some(preset) = &p.spec.preset {
        out.push_str(&format!("preset,{preset}\n"));
    }
    out.push_str(&format!("vanilla_parameters,{}\n", p.vanilla));
    out.push_str(&format!("se_parameters,{}\n", p.overhead));
    out.push_str(&format!("total_parameters,{}\n", p.vanilla + p.overhead));
    out.push_str(&format!("overhead_percent,{:.3}\n", p.percent()));
    out.push_str("\nblock,channels,se_parameters\n");
    for (name, c, n) in &p.per_block {
        out.push_str(&format!("{name},{c},{n}\n"));
    }
    out
}
