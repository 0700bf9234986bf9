//! Small summary statistics over seeds.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); zero for one value.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return if xs.is_empty() { f64::NAN } else { 0.0 };
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Coefficient of determination of the least-squares line of `y` on `x`,
/// `1 - SS_res / SS_tot`. A constant predictor explains nothing and gives 0.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "r_squared needs paired samples");
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if syy == 0.0 || sxx == 0.0 {
        return 0.0;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    1.0 - ss_res / syy
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn four_point_r_squared_by_hand() {
        // x = 1..4, y = 1, 3, 2, 4: slope 0.8, intercept 0.5,
        // residuals -0.3, 0.9, -0.9, 0.3 -> SS_res 1.8, SS_tot 5.
        let r2 = r_squared(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert_relative_eq!(r2, 1.0 - 1.8 / 5.0, epsilon = 1e-15);
    }

    #[test]
    fn identical_and_constant_predictors() {
        let y = [0.1, 0.4, 0.2, 0.9, 0.5];
        assert_relative_eq!(r_squared(&y, &y), 1.0, epsilon = 1e-15);
        assert_eq!(r_squared(&[2.0; 5], &y), 0.0);
    }

    #[test]
    fn summaries() {
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
        assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_relative_eq!(std_dev(&[1.0, 2.0, 3.0, 4.0]), (5.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_eq!(std_dev(&[7.0]), 0.0);
        assert!(mean(&[]).is_nan());
    }
}
