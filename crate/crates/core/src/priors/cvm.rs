use nalgebra::Vector2;

use crate::geometry::Point2;

/// Second difference `(m_next - 2 m_cur + m_prev) / dt^2`.
pub fn cvm_residual_position(m_prev: &Point2, m_cur: &Point2, m_next: &Point2, dt: f64) -> Vector2<f64> {
    let inv = 1.0 / (dt * dt);
    Vector2::new(
        (m_next.x - 2.0 * m_cur.x + m_prev.x) * inv,
        (m_next.y - 2.0 * m_cur.y + m_prev.y) * inv,
    )
}

/// `(m_cur - m_prev - v_prev dt, v_cur - v_prev)`.
pub fn cvm_residuals_velocity(
    m_prev: &Point2,
    m_cur: &Point2,
    v_prev: &Vector2<f64>,
    v_cur: &Vector2<f64>,
    dt: f64,
) -> (Vector2<f64>, Vector2<f64>) {
    let r1 = Vector2::new(m_cur.x - m_prev.x - v_prev.x * dt, m_cur.y - m_prev.y - v_prev.y * dt);
    (r1, v_cur - v_prev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_form_examples() {
        let p = |x, y| Point2::new(x, y);
        assert_eq!(cvm_residual_position(&p(0.0, 0.0), &p(1.0, 0.0), &p(2.0, 0.0), 1.0), Vector2::zeros());
        assert_eq!(
            cvm_residual_position(&p(0.0, 0.0), &p(1.0, 0.0), &p(1.0, 0.0), 1.0),
            Vector2::new(-1.0, 0.0)
        );
        let r = cvm_residual_position(&p(0.0, 0.0), &p(1.0, 0.0), &p(1.0, 0.0), 0.1);
        assert!((r.x + 100.0).abs() < 1e-9 && r.y == 0.0);
    }

    #[test]
    fn velocity_form_examples() {
        let m0 = Point2::new(0.0, 0.0);
        let m1 = Point2::new(0.1, 0.0);
        let v = Vector2::new(1.0, 0.0);
        let (r1, r2) = cvm_residuals_velocity(&m0, &m1, &v, &v, 0.1);
        assert_eq!((r1, r2), (Vector2::zeros(), Vector2::zeros()));
        let (_, r2) = cvm_residuals_velocity(&m0, &m1, &Vector2::new(0.0, 1.0), &v, 0.1);
        assert_eq!(r2, Vector2::new(1.0, -1.0));
    }
}
