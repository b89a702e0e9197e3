use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ensure_dir, train, RunConfig};
use crate::adapters::AdapterMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Switch {
    Pdrs,
    Dora,
    Tspd,
    XtCons,
}

impl Switch {
    pub const ALL: [Switch; 4] = [Switch::Pdrs, Switch::Dora, Switch::Tspd, Switch::XtCons];

    pub fn name(self) -> &'static str {
        match self {
            Switch::Pdrs => "pdrs",
            Switch::Dora => "dora",
            Switch::Tspd => "tspd",
            Switch::XtCons => "xtcons",
        }
    }

    fn apply(self, cfg: &mut RunConfig, on: bool) {
        match self {
            Switch::Pdrs => cfg.pdrs.enabled = on,
            Switch::Dora => cfg.model.adapter = if on { AdapterMode::Dora } else { AdapterMode::Lora },
            Switch::Tspd => cfg.model.tspd = on,
            Switch::XtCons => cfg.model.xtcons = on,
        }
    }

    fn read(self, cfg: &RunConfig) -> bool {
        match self {
            Switch::Pdrs => cfg.pdrs.enabled,
            Switch::Dora => cfg.model.adapter == AdapterMode::Dora,
            Switch::Tspd => cfg.model.tspd,
            Switch::XtCons => cfg.model.xtcons,
        }
    }

    /// Parse a comma-separated list; an empty string means no switches.
    pub fn parse_list(s: &str) -> Result<Vec<Switch>> {
        let mut out: Vec<Switch> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Switch::from_str)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for Switch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Switch::ALL
            .into_iter()
            .find(|w| w.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown switch {s:?}; expected pdrs, dora, tspd or xtcons")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub label: String,
    pub settings: Vec<(Switch, bool)>,
    pub config: RunConfig,
    pub hash: String,
}

/// Every on/off combination of `switches` on top of `base`, in binary
/// counting order with the first switch as the most significant bit.
pub fn plan_ablation(base: &RunConfig, switches: &[Switch]) -> Result<Vec<AblationVariant>> {
    let k = switches.len();
    let mut out = Vec::with_capacity(1 << k);
    for code in 0..(1usize << k) {
        let mut cfg = base.clone();
        let mut settings = Vec::with_capacity(k);
        for (i, &sw) in switches.iter().enumerate() {
            let on = code >> (k - 1 - i) & 1 == 1;
            sw.apply(&mut cfg, on);
            settings.push((sw, on));
        }
        let label = if settings.is_empty() {
            "baseline".to_string()
        } else {
            settings
                .iter()
                .map(|(s, on)| format!("{}-{}", s.name(), if *on { "on" } else { "off" }))
                .collect::<Vec<_>>()
                .join("_")
        };
        cfg.out_dir = base.out_dir.join(&label);
        let hash = cfg.hash()?;
        out.push(AblationVariant {
            label,
            settings,
            config: cfg,
            hash,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub hash: String,
    pub switches: [bool; 4],
    pub metrics: Vec<f64>,
    pub trainable_params: usize,
    pub delta_m: Option<f64>,
}

/// Run every variant in sequence and write `ablation.csv` under
/// `base.out_dir`.
pub fn ablate(base: &RunConfig, switches: &[Switch]) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let plan = plan_ablation(base, switches)?;
    ensure_dir(&base.out_dir)?;
    let mut rows = Vec::with_capacity(plan.len());
    for v in &plan {
        let rec = train(&v.config, false)?;
        let last = rec.last().ok_or_else(|| Error::Invariant("run produced no metrics".into()))?;
        rows.push(AblationRow {
            label: v.label.clone(),
            hash: v.hash.clone(),
            switches: Switch::ALL.map(|s| s.read(&v.config)),
            metrics: last.metrics.clone(),
            trainable_params: last.trainable_params,
            delta_m: last.delta_m,
        });
    }
    write_table(&base.out_dir.join("ablation.csv"), base, &rows)?;
    Ok(rows)
}

fn write_table(path: &Path, base: &RunConfig, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["label".into(), "config_hash".into()];
    header.extend(Switch::ALL.iter().map(|s| s.name().to_string()));
    header.extend(base.tasks.iter().map(|t| t.name.clone()));
    header.extend(["trainable_params".to_string(), "delta_m".to_string()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.label.clone(), r.hash.clone()];
        rec.extend(r.switches.iter().map(|b| (*b as u8).to_string()));
        rec.extend(r.metrics.iter().map(f64::to_string));
        rec.push(r.trainable_params.to_string());
        rec.push(r.delta_m.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_switch_set_is_one_row() {
        let plan = plan_ablation(&RunConfig::default(), &[]).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].label, "baseline");
    }

    #[test]
    fn parse_switches() {
        assert_eq!(
            Switch::parse_list("xtcons, pdrs").unwrap(),
            vec![Switch::Pdrs, Switch::XtCons]
        );
        assert!(Switch::parse_list("bogus").is_err());
        assert!(Switch::parse_list("").unwrap().is_empty());
    }
}
