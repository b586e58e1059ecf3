//! Deployability check of binarization algorithms against inference-library
//! capability profiles.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarize::Granularity;
use crate::error::{Error, Result};

pub const DEPLOY_TOML: &str = include_str!("../data/deploy.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleForm {
    Fp32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapabilityProfile {
    pub name: String,
    pub scale_granularity_supported: Vec<Granularity>,
    #[serde(default)]
    pub scale_form: Vec<ScaleForm>,
    pub fold_bn: bool,
    /// Scales are only executed when fused into BN.
    #[serde(default)]
    pub scale_must_fold: bool,
    pub act_rescaling: bool,
    pub act_meanshift: bool,
}

impl CapabilityProfile {
    pub fn permissive(name: &str) -> Self {
        CapabilityProfile {
            name: name.to_owned(),
            scale_granularity_supported: vec![
                Granularity::None,
                Granularity::Layer,
                Granularity::Channel,
                Granularity::Spatial,
            ],
            scale_form: vec![ScaleForm::Fp32],
            fold_bn: true,
            scale_must_fold: false,
            act_rescaling: true,
            act_meanshift: true,
        }
    }

    pub fn empty(name: &str) -> Self {
        CapabilityProfile {
            name: name.to_owned(),
            scale_granularity_supported: Vec::new(),
            scale_form: Vec::new(),
            fold_bn: false,
            scale_must_fold: false,
            act_rescaling: false,
            act_meanshift: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmRequirement {
    pub name: String,
    pub scale_granularity_needed: Granularity,
    /// The scale is fused into BN for deployment.
    pub needs_fold_bn: bool,
    pub needs_act_rescaling: bool,
    pub needs_act_meanshift: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Deployable,
    Blocked(Vec<String>),
}

impl Verdict {
    pub fn is_deployable(&self) -> bool {
        matches!(self, Verdict::Deployable)
    }

    pub fn reasons(&self) -> &[String] {
        match self {
            Verdict::Deployable => &[],
            Verdict::Blocked(r) => r,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Deployable => f.write_str("deployable"),
            Verdict::Blocked(r) => write!(f, "blocked: {}", r.join("; ")),
        }
    }
}

fn granularity_phrase(g: Granularity) -> &'static str {
    match g {
        Granularity::None => "scale-free binarization",
        Granularity::Layer => "layer-wise scale",
        Granularity::Channel => "channel-wise scale",
        Granularity::Spatial => "spatial-wise scale",
    }
}

/// Lists every violated requirement, not just the first.
pub fn check(req: &AlgorithmRequirement, cap: &CapabilityProfile) -> Verdict {
    let g = req.scale_granularity_needed;
    let has_scale = g != Granularity::None;
    let mut reasons = Vec::new();
    if !cap.scale_granularity_supported.contains(&g) {
        reasons.push(format!("{} unsupported", granularity_phrase(g)));
    }
    if has_scale && !cap.scale_form.contains(&ScaleForm::Fp32) {
        reasons.push("fp32 scale form unsupported".to_owned());
    }
    if req.needs_fold_bn && !cap.fold_bn {
        reasons.push("BN fold unsupported".to_owned());
    }
    if has_scale && cap.scale_must_fold && !req.needs_fold_bn {
        reasons.push("BN fold required but not applicable".to_owned());
    }
    if req.needs_act_rescaling && !cap.act_rescaling {
        reasons.push("activation re-scaling unsupported".to_owned());
    }
    if req.needs_act_meanshift && !cap.act_meanshift {
        reasons.push("activation mean-shifting unsupported".to_owned());
    }
    if reasons.is_empty() {
        Verdict::Deployable
    } else {
        Verdict::Blocked(reasons)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeployData {
    #[serde(default, rename = "library")]
    pub libraries: Vec<CapabilityProfile>,
    #[serde(default, rename = "algorithm")]
    pub algorithms: Vec<AlgorithmRequirement>,
}

impl DeployData {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn shipped() -> Self {
        Self::from_toml_str(DEPLOY_TOML).expect("bundled deploy data is valid")
    }

    pub fn algorithm(&self, name: &str) -> Option<&AlgorithmRequirement> {
        self.algorithms.iter().find(|a| a.name.eq_ignore_ascii_case(name))
    }

    pub fn library(&self, name: &str) -> Option<&CapabilityProfile> {
        self.libraries.iter().find(|l| l.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub algorithms: Vec<String>,
    pub libraries: Vec<String>,
    /// `verdicts[a][l]`.
    pub verdicts: Vec<Vec<Verdict>>,
}

pub fn matrix(reqs: &[AlgorithmRequirement], caps: &[CapabilityProfile]) -> Result<Grid> {
    if reqs.is_empty() || caps.is_empty() {
        return Err(Error::Empty("deployability matrix"));
    }
    Ok(Grid {
        algorithms: reqs.iter().map(|r| r.name.clone()).collect(),
        libraries: caps.iter().map(|c| c.name.clone()).collect(),
        verdicts: reqs
            .iter()
            .map(|r| caps.iter().map(|c| check(r, c)).collect())
            .collect(),
    })
}

impl Grid {
    pub fn get(&self, algorithm: &str, library: &str) -> Option<&Verdict> {
        let a = self.algorithms.iter().position(|x| x == algorithm)?;
        let l = self.libraries.iter().position(|x| x == library)?;
        Some(&self.verdicts[a][l])
    }

    pub fn deployable_anywhere(&self, algorithm: &str) -> Option<bool> {
        let a = self.algorithms.iter().position(|x| x == algorithm)?;
        Some(self.verdicts[a].iter().any(Verdict::is_deployable))
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["algorithm", "library", "deployable", "reasons"])?;
        for (a, row) in self.algorithms.iter().zip(&self.verdicts) {
            for (l, v) in self.libraries.iter().zip(row) {
                let ok = if v.is_deployable() { "true" } else { "false" };
                w.write_record([a.as_str(), l.as_str(), ok, &v.reasons().join("; ")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| algorithm |");
        for l in &self.libraries {
            let _ = write!(s, " {l} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.libraries.len()));
        s.push('\n');
        for (a, row) in self.algorithms.iter().zip(&self.verdicts) {
            let _ = write!(s, "| {a} |");
            for v in row {
                match v {
                    Verdict::Deployable => s.push_str(" yes |"),
                    Verdict::Blocked(r) => {
                        let _ = write!(s, " no ({}) |", r.join("; "));
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shipped() -> (DeployData, Grid) {
        let d = DeployData::shipped();
        let g = matrix(&d.algorithms, &d.libraries).unwrap();
        (d, g)
    }

    #[test]
    fn shipped_profiles_match_capability_rows() {
        let d = DeployData::shipped();
        let larq = d.library("larq").unwrap();
        assert_eq!(larq.scale_granularity_supported, vec![Granularity::None, Granularity::Channel]);
        assert!(larq.fold_bn && !larq.act_rescaling && larq.act_meanshift);
        let dabnn = d.library("dabnn").unwrap();
        assert!(dabnn.fold_bn && !dabnn.act_rescaling && !dabnn.act_meanshift);
        assert_eq!(d.algorithms.len(), 8);
    }

    #[test]
    fn spec_examples() {
        let (d, _) = shipped();
        let alg = |n| d.algorithm(n).unwrap();
        let lib = |n| d.library(n).unwrap();
        assert_eq!(check(alg("BNN"), lib("daBNN")), Verdict::Deployable);
        assert_eq!(
            check(alg("XNOR"), lib("Larq")),
            Verdict::Blocked(vec!["activation re-scaling unsupported".into()])
        );
        for l in ["Larq", "daBNN"] {
            assert_eq!(
                check(alg("XNOR++"), lib(l)),
                Verdict::Blocked(vec![
                    "spatial-wise scale unsupported".into(),
                    "BN fold required but not applicable".into()
                ])
            );
        }
        assert!(check(alg("ReActNet"), lib("Larq")).is_deployable());
        assert_eq!(
            check(alg("ReActNet"), lib("daBNN")).reasons(),
            ["activation mean-shifting unsupported"]
        );
    }

    #[test]
    fn deployable_column() {
        let (_, g) = shipped();
        for a in &g.algorithms {
            let expect = !matches!(a.as_str(), "XNOR" | "XNOR++");
            assert_eq!(g.deployable_anywhere(a), Some(expect), "{a}");
        }
        for l in &g.libraries {
            assert!(!g.get("XNOR", l).unwrap().is_deployable());
            assert!(!g.get("XNOR++", l).unwrap().is_deployable());
        }
    }

    #[test]
    fn trivial_profiles() {
        let (d, _) = shipped();
        let all = matrix(&d.algorithms, &[CapabilityProfile::permissive("all")]).unwrap();
        assert!(all.verdicts.iter().all(|r| r[0].is_deployable()));
        let none = matrix(&d.algorithms, &[CapabilityProfile::empty("none")]).unwrap();
        assert!(none.verdicts.iter().all(|r| !r[0].is_deployable()));
        assert!(matrix(&[], &d.libraries).is_err());
    }

    #[test]
    fn grid_outputs() {
        let (_, g) = shipped();
        let mut buf = Vec::new();
        g.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 16);
        assert!(text.contains("XNOR,Larq,false,activation re-scaling unsupported"));
        let md = g.to_markdown();
        assert!(md.starts_with("| algorithm | Larq | daBNN |"));
        assert_eq!(md.lines().count(), 2 + 8);
    }

    fn granularity() -> impl Strategy<Value = Granularity> {
        prop_oneof![
            Just(Granularity::None),
            Just(Granularity::Layer),
            Just(Granularity::Channel),
            Just(Granularity::Spatial)
        ]
    }

    fn requirement() -> impl Strategy<Value = AlgorithmRequirement> {
        (granularity(), any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(g, f, r, m)| AlgorithmRequirement {
            name: "r".into(),
            scale_granularity_needed: g,
            needs_fold_bn: f,
            needs_act_rescaling: r,
            needs_act_meanshift: m,
        })
    }

    fn profile() -> impl Strategy<Value = CapabilityProfile> {
        (prop::collection::vec(granularity(), 0..4), any::<bool>(), any::<[bool; 4]>()).prop_map(|(g, fp32, b)| {
            CapabilityProfile {
                name: "p".into(),
                scale_granularity_supported: g,
                scale_form: if fp32 { vec![ScaleForm::Fp32] } else { vec![] },
                fold_bn: b[0],
                scale_must_fold: b[1],
                act_rescaling: b[2],
                act_meanshift: b[3],
            }
        })
    }

    proptest! {
        #[test]
        fn adding_capabilities_is_monotone(req in requirement(), cap in profile(), extra in granularity(), which in 0usize..5) {
            let mut more = cap.clone();
            match which {
                0 => more.scale_granularity_supported.push(extra),
                1 => more.fold_bn = true,
                2 => more.act_rescaling = true,
                3 => more.act_meanshift = true,
                _ => more.scale_must_fold = false,
            }
            if check(&req, &cap).is_deployable() {
                prop_assert!(check(&req, &more).is_deployable());
            }
            prop_assert!(check(&req, &more).reasons().len() <= check(&req, &cap).reasons().len());
        }

        #[test]
        fn reasons_are_complete(req in requirement(), cap in profile()) {
            let v = check(&req, &cap);
            let mut expected = 0;
            let has_scale = req.scale_granularity_needed != Granularity::None;
            expected += usize::from(!cap.scale_granularity_supported.contains(&req.scale_granularity_needed));
            expected += usize::from(has_scale && cap.scale_form.is_empty());
            expected += usize::from(req.needs_fold_bn && !cap.fold_bn);
            expected += usize::from(has_scale && cap.scale_must_fold && !req.needs_fold_bn);
            expected += usize::from(req.needs_act_rescaling && !cap.act_rescaling);
            expected += usize::from(req.needs_act_meanshift && !cap.act_meanshift);
            prop_assert_eq!(v.reasons().len(), expected);
        }
    }
}
