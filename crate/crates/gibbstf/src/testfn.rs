//! Test functions pluggable into the GNZ residual.
//!
//! Every shipped function factors as `h(x, φ, θ) = assemble(s(x, φ), V(x|φ), θ)`
//! where the scalar statistic `s` is free of `θ`. Estimation code exploits the
//! split: statistics are computed once per evaluation point and the cheap
//! `assemble` step runs per candidate `θ`. Functions flagged `fiksel_factor`
//! carry an `e^{⟨θ,V⟩}` factor that cancels against the conditional intensity
//! in the integral term, so their weighted integrand is evaluated in closed
//! form (`weighted`), and `h_fiksel` additionally admits the plug-in integral
//! `|φ_Λ| π r²` in two dimensions.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{same_position, Configuration, MarkedPoint, NeighborLookup, Window};
use crate::models::{dot, GibbsModel, ModelKind};

pub trait TestFunction: Send + Sync {
    fn label(&self) -> &str;

    fn depends_on_theta(&self) -> bool;

    /// Whether the function carries an `e^{⟨θ,V⟩}` factor.
    fn fiksel_factor(&self) -> bool {
        false
    }

    /// Range of the function's own statistic: `s(x, φ) = s(x, φ_{B(x, range)})`.
    /// Dependence on `φ` through `V` is covered by the model's range.
    fn range(&self) -> f64;

    /// θ-free statistic at `(x, φ \ exclude)`.
    fn stat(
        &self,
        x: &MarkedPoint,
        nb: &dyn NeighborLookup,
        exclude: Option<&MarkedPoint>,
    ) -> f64;

    /// `h(x, φ, θ)` assembled from the statistic and the model statistics.
    fn assemble(&self, stat: f64, model_stats: &[f64], theta: &[f64]) -> f64;

    /// Integrand `h(x, φ, θ) e^{−⟨θ, V(x|φ)⟩}`; overridden where the
    /// exponential cancels algebraically.
    fn weighted(&self, stat: f64, model_stats: &[f64], theta: &[f64]) -> f64 {
        self.assemble(stat, model_stats, theta) * (-dot(theta, model_stats)).exp()
    }

    /// Validate the binding against the model the estimator will use.
    fn check_model(&self, _model: &dyn GibbsModel) -> Result<()> {
        Ok(())
    }

    /// Closed-form substitute for `∫_Λ h e^{−V} dx`, when one applies.
    fn shortcut_integral(&self, _cfg: &Configuration, _window: &Window) -> Option<f64> {
        None
    }

    /// Full evaluation `h(x, φ \ exclude, θ)` with the model bound.
    fn evaluate(
        &self,
        x: &MarkedPoint,
        nb: &dyn NeighborLookup,
        exclude: Option<&MarkedPoint>,
        model: &dyn GibbsModel,
        theta: &[f64],
    ) -> f64 {
        let s = self.stat(x, nb, exclude);
        let v = model.stats(x, nb, exclude);
        self.assemble(s, &v, theta)
    }
}

/// `h ≡ 1`.
pub struct ConstOne;

impl TestFunction for ConstOne {
    fn label(&self) -> &str {
        "const"
    }
    fn depends_on_theta(&self) -> bool {
        false
    }
    fn range(&self) -> f64 {
        0.0
    }
    fn stat(&self, _: &MarkedPoint, _: &dyn NeighborLookup, _: Option<&MarkedPoint>) -> f64 {
        1.0
    }
    fn assemble(&self, stat: f64, _: &[f64], _: &[f64]) -> f64 {
        stat
    }
}

pub fn h_const() -> Arc<dyn TestFunction> {
    Arc::new(ConstOne)
}

/// `h_r(x, φ) = |φ_{B(x,r)}|`.
pub struct CountInBall {
    r: f64,
    label: String,
}

impl TestFunction for CountInBall {
    fn label(&self) -> &str {
        &self.label
    }
    fn depends_on_theta(&self) -> bool {
        false
    }
    fn range(&self) -> f64 {
        self.r
    }
    fn stat(
        &self,
        x: &MarkedPoint,
        nb: &dyn NeighborLookup,
        exclude: Option<&MarkedPoint>,
    ) -> f64 {
        nb.count_within(&x.position, self.r, exclude) as f64
    }
    fn assemble(&self, stat: f64, _: &[f64], _: &[f64]) -> f64 {
        stat
    }
}

pub fn h_count(r: f64) -> Arc<dyn TestFunction> {
    Arc::new(CountInBall {
        r,
        label: format!("count({r})"),
    })
}

/// `h_r(x, φ, θ) = |φ_{B(x,r)}| e^{⟨θ, V(x|φ)⟩}`; the integral term then
/// reduces to `∫_Λ |φ_{B(x,r)}| dx ≈ |φ_Λ| π r²` in two dimensions.
pub struct FikselCount {
    r: f64,
    label: String,
}

impl TestFunction for FikselCount {
    fn label(&self) -> &str {
        &self.label
    }
    fn depends_on_theta(&self) -> bool {
        true
    }
    fn fiksel_factor(&self) -> bool {
        true
    }
    fn range(&self) -> f64 {
        self.r
    }
    fn stat(
        &self,
        x: &MarkedPoint,
        nb: &dyn NeighborLookup,
        exclude: Option<&MarkedPoint>,
    ) -> f64 {
        nb.count_within(&x.position, self.r, exclude) as f64
    }
    fn assemble(&self, stat: f64, model_stats: &[f64], theta: &[f64]) -> f64 {
        stat * dot(theta, model_stats).exp()
    }
    fn weighted(&self, stat: f64, _: &[f64], _: &[f64]) -> f64 {
        stat
    }
    fn shortcut_integral(&self, cfg: &Configuration, window: &Window) -> Option<f64> {
        if window.dim() == 2 {
            Some(cfg.count_in(window) as f64 * PI * self.r * self.r)
        } else {
            None
        }
    }
}

pub fn h_fiksel(r: f64) -> Arc<dyn TestFunction> {
    Arc::new(FikselCount {
        r,
        label: format!("fiksel({r})"),
    })
}

/// `h ≡ e^{⟨θ, V(x|φ)⟩}` (together with `h ≡ 1` this is the classic pair for
/// which the contrast admits a second root on the zero-interaction axis).
pub struct ExpEnergy;

impl TestFunction for ExpEnergy {
    fn label(&self) -> &str {
        "exp_energy"
    }
    fn depends_on_theta(&self) -> bool {
        true
    }
    fn fiksel_factor(&self) -> bool {
        true
    }
    fn range(&self) -> f64 {
        0.0
    }
    fn stat(&self, _: &MarkedPoint, _: &dyn NeighborLookup, _: Option<&MarkedPoint>) -> f64 {
        1.0
    }
    fn assemble(&self, _: f64, model_stats: &[f64], theta: &[f64]) -> f64 {
        dot(theta, model_stats).exp()
    }
    fn weighted(&self, _: f64, _: &[f64], _: &[f64]) -> f64 {
        1.0
    }
}

pub fn h_exp_energy() -> Arc<dyn TestFunction> {
    Arc::new(ExpEnergy)
}

/// Indicator family bound to a Strauss model of radius `r`:
/// `h_k = e^{(k−1)θ₂}` when `|φ_{B(x,R)}| = k−1`, else 0.
pub struct StraussIndicator {
    k: usize,
    r: f64,
    label: String,
}

impl TestFunction for StraussIndicator {
    fn label(&self) -> &str {
        &self.label
    }
    fn depends_on_theta(&self) -> bool {
        true
    }
    fn range(&self) -> f64 {
        self.r
    }
    fn stat(
        &self,
        x: &MarkedPoint,
        nb: &dyn NeighborLookup,
        exclude: Option<&MarkedPoint>,
    ) -> f64 {
        nb.count_within(&x.position, self.r, exclude) as f64
    }
    fn assemble(&self, stat: f64, _: &[f64], theta: &[f64]) -> f64 {
        if (stat - (self.k - 1) as f64).abs() < 0.5 {
            ((self.k - 1) as f64 * theta[1]).exp()
        } else {
            0.0
        }
    }
    fn weighted(&self, stat: f64, _: &[f64], theta: &[f64]) -> f64 {
        // e^{(k−1)θ₂} e^{−θ₁ − (k−1)θ₂} = e^{−θ₁} on the indicator event
        if (stat - (self.k - 1) as f64).abs() < 0.5 {
            (-theta[0]).exp()
        } else {
            0.0
        }
    }
    fn check_model(&self, model: &dyn GibbsModel) -> Result<()> {
        match model.kind() {
            ModelKind::Strauss { r } if r == self.r => Ok(()),
            _ => Err(Error::ModelMismatch {
                label: self.label.clone(),
            }),
        }
    }
}

/// Build the `k`-th Strauss indicator bound to `model`'s interaction radius.
pub fn h_strauss_indicator(k: usize, model: &crate::models::StraussModel) -> Result<Arc<dyn TestFunction>> {
    if k == 0 {
        return Err(Error::InvalidArgument("the indicator family starts at k = 1".into()));
    }
    Ok(Arc::new(StraussIndicator {
        k,
        r: model.interaction_radius(),
        label: format!("strauss_indicator({k})"),
    }))
}

/// One coordinate of the energy gradient: `h_i(x, φ) = V_i(x|φ)`.
pub struct GradVComponent {
    index: usize,
    model: Arc<dyn GibbsModel>,
    label: String,
}

impl TestFunction for GradVComponent {
    fn label(&self) -> &str {
        &self.label
    }
    fn depends_on_theta(&self) -> bool {
        false
    }
    fn range(&self) -> f64 {
        self.model.range()
    }
    fn stat(
        &self,
        x: &MarkedPoint,
        nb: &dyn NeighborLookup,
        exclude: Option<&MarkedPoint>,
    ) -> f64 {
        self.model.stats(x, nb, exclude)[self.index]
    }
    fn assemble(&self, stat: f64, _: &[f64], _: &[f64]) -> f64 {
        stat
    }
    fn check_model(&self, model: &dyn GibbsModel) -> Result<()> {
        if model.kind() == self.model.kind() {
            Ok(())
        } else {
            Err(Error::ModelMismatch {
                label: self.label.clone(),
            })
        }
    }
}

/// The vector of sufficient statistics as test functions; with these the
/// contrast's stationarity conditions are the pseudo-likelihood score.
pub fn h_gradv(model: &Arc<dyn GibbsModel>) -> Vec<Arc<dyn TestFunction>> {
    (0..model.param_count())
        .map(|i| {
            Arc::new(GradVComponent {
                index: i,
                model: Arc::clone(model),
                label: format!("gradV[{i}]"),
            }) as Arc<dyn TestFunction>
        })
        .collect()
}

/// Length of the part of the circle `C(x, r)` not covered by discs of radius
/// `r` centered at `neighbors` (exact circle–circle intersection arcs).
pub fn uncovered_arc_length(x: &[f64], r: f64, neighbors: &[&[f64]]) -> f64 {
    let two_pi = 2.0 * PI;
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for y in neighbors {
        let dx = y[0] - x[0];
        let dy = y[1] - x[1];
        let d = (dx * dx + dy * dy).sqrt();
        if d <= 0.0 || d >= 2.0 * r {
            continue;
        }
        let phi = dy.atan2(dx);
        let alpha = (d / (2.0 * r)).acos();
        let (a, b) = (phi - alpha, phi + alpha);
        // normalize to [0, 2π), splitting wrap-around intervals
        let a_mod = a.rem_euclid(two_pi);
        let b_mod = a_mod + (b - a);
        if b_mod > two_pi {
            intervals.push((a_mod, two_pi));
            intervals.push((0.0, b_mod - two_pi));
        } else {
            intervals.push((a_mod, b_mod));
        }
    }
    intervals.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut covered = 0.0;
    let mut end = -1.0f64;
    for (a, b) in intervals {
        if a > end {
            covered += b - a;
            end = b;
        } else if b > end {
            covered += b - end;
            end = b;
        }
    }
    r * (two_pi - covered).max(0.0)
}

fn circle_neighbors(
    x: &MarkedPoint,
    r: f64,
    nb: &dyn NeighborLookup,
    exclude: Option<&MarkedPoint>,
) -> Vec<Vec<f64>> {
    let mut neighbors = Vec::new();
    nb.for_each_within(&x.position, 2.0 * r, &mut |p| {
        let skip = same_position(&p.position, &x.position)
            || exclude.is_some_and(|e| same_position(&p.position, &e.position));
        if !skip {
            neighbors.push(p.position.clone());
        }
    });
    neighbors
}

/// Uncovered perimeter of the sphere of radius `r` around `x`; summing it over
/// the points of a pattern gives the boundary length of the union of discs.
pub struct PerimeterUncovered {
    r: f64,
    label: String,
}

impl TestFunction for PerimeterUncovered {
    fn label(&self) -> &str {
        &self.label
    }
    fn depends_on_theta(&self) -> bool {
        false
    }
    fn range(&self) -> f64 {
        2.0 * self.r
    }
    fn stat(
        &self,
        x: &MarkedPoint,
        nb: &dyn NeighborLookup,
        exclude: Option<&MarkedPoint>,
    ) -> f64 {
        let neighbors = circle_neighbors(x, self.r, nb, exclude);
        let refs: Vec<&[f64]> = neighbors.iter().map(|v| v.as_slice()).collect();
        uncovered_arc_length(&x.position, self.r, &refs)
    }
    fn assemble(&self, stat: f64, _: &[f64], _: &[f64]) -> f64 {
        stat
    }
    fn check_model(&self, model: &dyn GibbsModel) -> Result<()> {
        match model.kind() {
            ModelKind::Area { r } if r == self.r => Ok(()),
            _ => Err(Error::ModelMismatch {
                label: self.label.clone(),
            }),
        }
    }
}

/// Tolerance on the uncovered arc below which a disc still counts as isolated.
const ISOLATION_SLACK: f64 = 1e-9;

/// Indicator that the disc of radius `r` around `x` touches no other disc.
pub struct IsolatedDisc {
    r: f64,
    label: String,
}

impl TestFunction for IsolatedDisc {
    fn label(&self) -> &str {
        &self.label
    }
    fn depends_on_theta(&self) -> bool {
        false
    }
    fn range(&self) -> f64 {
        2.0 * self.r
    }
    fn stat(
        &self,
        x: &MarkedPoint,
        nb: &dyn NeighborLookup,
        exclude: Option<&MarkedPoint>,
    ) -> f64 {
        let neighbors = circle_neighbors(x, self.r, nb, exclude);
        let refs: Vec<&[f64]> = neighbors.iter().map(|v| v.as_slice()).collect();
        uncovered_arc_length(&x.position, self.r, &refs)
    }
    fn assemble(&self, stat: f64, _: &[f64], _: &[f64]) -> f64 {
        if stat >= 2.0 * PI * self.r - ISOLATION_SLACK {
            1.0
        } else {
            0.0
        }
    }
    fn check_model(&self, model: &dyn GibbsModel) -> Result<()> {
        match model.kind() {
            ModelKind::Area { r } if r == self.r => Ok(()),
            _ => Err(Error::ModelMismatch {
                label: self.label.clone(),
            }),
        }
    }
}

/// Uncovered-perimeter and isolation test functions bound to an area model.
pub fn h_per(model: &crate::models::AreaModel) -> Arc<dyn TestFunction> {
    let r = model.disc_radius();
    Arc::new(PerimeterUncovered {
        r,
        label: format!("per({r})"),
    })
}

pub fn h_iso(model: &crate::models::AreaModel) -> Arc<dyn TestFunction> {
    let r = model.disc_radius();
    Arc::new(IsolatedDisc {
        r,
        label: format!("iso({r})"),
    })
}

/// Declarative test-function specification, as used in experiment configs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum TestFnSpec {
    #[serde(rename = "const")]
    Const,
    #[serde(rename = "count")]
    Count { r: f64 },
    #[serde(rename = "fiksel")]
    Fiksel { r: f64 },
    #[serde(rename = "strauss_indicator")]
    StraussIndicator { k: usize },
    #[serde(rename = "gradV")]
    GradV,
    #[serde(rename = "per")]
    Per,
    #[serde(rename = "iso")]
    Iso,
    #[serde(rename = "exp_energy")]
    ExpEnergy,
}

/// Instantiate a list of specifications against a model. `gradV` expands into
/// one function per parameter.
pub fn build_test_functions(
    specs: &[TestFnSpec],
    model: &Arc<dyn GibbsModel>,
) -> Result<Vec<Arc<dyn TestFunction>>> {
    let mut out: Vec<Arc<dyn TestFunction>> = Vec::new();
    for spec in specs {
        match spec {
            TestFnSpec::Const => out.push(h_const()),
            TestFnSpec::Count { r } => out.push(h_count(*r)),
            TestFnSpec::Fiksel { r } => out.push(h_fiksel(*r)),
            TestFnSpec::StraussIndicator { k } => match model.kind() {
                ModelKind::Strauss { r } => {
                    if *k == 0 {
                        return Err(Error::InvalidArgument(
                            "the indicator family starts at k = 1".into(),
                        ));
                    }
                    out.push(Arc::new(StraussIndicator {
                        k: *k,
                        r,
                        label: format!("strauss_indicator({k})"),
                    }));
                }
                _ => {
                    return Err(Error::ModelMismatch {
                        label: format!("strauss_indicator({k})"),
                    })
                }
            },
            TestFnSpec::GradV => out.extend(h_gradv(model)),
            TestFnSpec::Per | TestFnSpec::Iso => match model.kind() {
                ModelKind::Area { r } => {
                    if matches!(spec, TestFnSpec::Per) {
                        out.push(Arc::new(PerimeterUncovered {
                            r,
                            label: format!("per({r})"),
                        }));
                    } else {
                        out.push(Arc::new(IsolatedDisc {
                            r,
                            label: format!("iso({r})"),
                        }));
                    }
                }
                _ => {
                    return Err(Error::ModelMismatch {
                        label: "per/iso".into(),
                    })
                }
            },
            TestFnSpec::ExpEnergy => out.push(h_exp_energy()),
        }
    }
    for h in &out {
        h.check_model(model.as_ref())?;
    }
    Ok(out)
}
