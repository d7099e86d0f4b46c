use proptest::prelude::*;
use twoway_core::flops::{estimate, report, terms, DimProfile, ModelFamily, Stage};

fn total(model: ModelFamily, p: &DimProfile) -> f64 {
    estimate(model, p).unwrap().total
}

#[test]
fn reference_totals() {
    let p = DimProfile::reference();
    for (model, paper) in [(ModelFamily::Twlc, 0.6e6), (ModelFamily::Twbaf, 2.5e6), (ModelFamily::Twrnn, 2.6e6)] {
        let t = total(model, &p);
        assert!(t >= paper / 2.0 && t <= paper * 2.0, "{} total {t}", model.name());
    }
    assert!(total(ModelFamily::Twlc, &p) < total(ModelFamily::Twbaf, &p));
}

#[test]
fn total_is_both_users_encoding_and_decoding() {
    let p = DimProfile::reference();
    for model in ModelFamily::ALL {
        let e = estimate(model, &p).unwrap();
        assert_eq!(e.total, 2.0 * (e.encode + e.decode));
        let by_stage = |s| terms(model, &p).unwrap().iter().filter(|t| t.stage == s).map(|t| t.macs).sum::<f64>();
        let scale = 2.0 * model.constant();
        assert!((e.encode - scale * by_stage(Stage::Encode)).abs() < 1e-6);
        assert!((e.decode - scale * by_stage(Stage::Decode)).abs() < 1e-6);
    }
}

#[test]
fn quadratic_width_terms_quadruple() {
    let p = DimProfile::reference();
    let mut wide = p.clone();
    wide.h_c *= 2;
    let sq = |q: &DimProfile| -> Vec<f64> {
        terms(ModelFamily::Twlc, q).unwrap().iter().filter(|t| t.label == "h_c^2").map(|t| t.macs).collect()
    };
    for (a, b) in sq(&p).iter().zip(sq(&wide)) {
        assert_eq!(b, 4.0 * a);
    }
    let grow = total(ModelFamily::Twlc, &wide) / total(ModelFamily::Twlc, &p);
    assert!(grow > 2.0 && grow < 4.0);
}

#[test]
fn csv_has_one_row_per_model_and_profile() {
    let mut small = DimProfile::reference();
    small.t = 12;
    let rows = report(&[DimProfile::reference(), small]).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.total > 0.0));
}

fn profile() -> impl Strategy<Value = DimProfile> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..64, 1usize..64, 1usize..64, 1usize..4, 1usize..4).prop_map(
        |(m, ell, r, h_c, h_b, h_r, le, ld)| DimProfile {
            k: m * ell,
            m,
            t: ell * r,
            h_c,
            h_b,
            h_r,
            enc_layers: le,
            dec_layers: ld,
        },
    )
}

proptest! {
    #[test]
    fn monotone_in_every_dimension(p in profile()) {
        for model in ModelFamily::ALL {
            let base = total(model, &p);
            let mut bumps = Vec::new();
            let mut q = p.clone(); q.h_c += 1; bumps.push(q);
            let mut q = p.clone(); q.h_b += 1; bumps.push(q);
            let mut q = p.clone(); q.h_r += 1; bumps.push(q);
            let mut q = p.clone(); q.enc_layers += 1; bumps.push(q);
            let mut q = p.clone(); q.dec_layers += 1; bumps.push(q);
            let mut q = p.clone(); q.t += p.ell(); bumps.push(q);
            for q in bumps {
                prop_assert!(total(model, &q) >= base);
            }
        }
    }
}
