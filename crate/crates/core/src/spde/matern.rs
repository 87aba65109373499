//! Matérn correlation with smoothness one.

use serde::{Deserialize, Serialize};

/// Modified Bessel function of the second kind, order one.
///
/// Polynomial approximations with relative error below 1e-7 on x > 0.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k1 needs x > 0");
    if x <= 2.0 {
        let y = x * x / 4.0;
        (x / 2.0).ln() * bessel_i1(x)
            + (1.0 / x)
                * (1.0
                    + y * (0.154_431_44
                        + y * (-0.672_785_79
                            + y * (-0.181_568_97
                                + y * (-0.019_194_02
                                    + y * (-0.001_104_04 + y * (-0.000_046_86)))))))
    } else {
        let y = 2.0 / x;
        ((-x).exp() / x.sqrt())
            * (1.253_314_14
                + y * (0.234_986_19
                    + y * (-0.036_556_20
                        + y * (0.015_042_68
                            + y * (-0.007_803_53 + y * (0.003_256_14 + y * (-0.000_682_45)))))))
    }
}

fn bessel_i1(x: f64) -> f64 {
    let ax = x.abs();
    let r = if ax < 3.75 {
        let y = (x / 3.75).powi(2);
        ax * (0.5
            + y * (0.878_905_94
                + y * (0.514_988_69
                    + y * (0.150_849_34
                        + y * (0.026_587_33 + y * (0.003_015_32 + y * 0.000_324_11))))))
    } else {
        let y = 3.75 / ax;
        let p = 0.022_829_67 + y * (-0.028_953_12 + y * (0.017_876_54 - y * 0.004_200_59));
        let p = 0.398_942_28
            + y * (-0.039_880_24
                + y * (-0.003_620_18 + y * (0.001_638_01 + y * (-0.010_315_55 + y * p))));
        p * ax.exp() / ax.sqrt()
    };
    if x < 0.0 {
        -r
    } else {
        r
    }
}

/// Correlation (κh)·K₁(κh), equal to 1 at h = 0.
pub fn matern_correlation(h: f64, kappa: f64) -> f64 {
    let x = kappa * h;
    if x <= 0.0 {
        1.0
    } else if x > 700.0 {
        0.0
    } else {
        x * bessel_k1(x)
    }
}

/// Field variance and scale; the smoothness is fixed at one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub sigma_w2: f64,
    pub kappa: f64,
}

impl MaternParams {
    pub fn from_range(range: f64, sigma_w2: f64) -> Self {
        Self {
            sigma_w2,
            kappa: 8f64.sqrt() / range,
        }
    }

    /// Distance where the correlation falls to about 0.14.
    pub fn range(&self) -> f64 {
        8f64.sqrt() / self.kappa
    }

    pub fn tau(&self) -> f64 {
        super::tau_from_sigma(self.sigma_w2, self.kappa)
    }
}
