use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rtnag::argru::{ArgruParams, CellContext, CellFlags, GateKind};
use rtnag::geometry::CholPoint;
use rtnag::ode::{integrate, integrate_steps, FnSystem, Method, SolverConfig};
use rtnag::params::ParamStore;
use rtnag::space::{Space, TriLayout};
use rtnag::tnode::{OdeFieldParams, TimeEncoderParams, TimeScale};
use rtnag::{Tape, Tensor};

struct Net {
    store: ParamStore<f64>,
    argru: ArgruParams,
    field: OdeFieldParams,
    time: TimeEncoderParams,
    layout: TriLayout,
    solver: SolverConfig,
}

impl Net {
    /// Every weight drawn from N(0, std²).
    fn new(q: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TriLayout::new(q);
        let p = layout.packed_len();
        let mut store = ParamStore::new();
        let time = TimeEncoderParams::init(&mut store);
        let field = OdeFieldParams::init(&mut store, p, 12, &mut rng);
        let argru = ArgruParams::init(&mut store, p, &mut rng);
        let n = Normal::new(0.0, std).unwrap();
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = n.sample(&mut rng);
            }
        }
        Self {
            store,
            argru,
            field,
            time,
            layout,
            solver: SolverConfig::default(),
        }
    }

    fn step(&self, flags: CellFlags, h: &CholPoint<f64>, e: &CholPoint<f64>, t0: f64, t1: f64) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let pv = self.store.as_constants(&mut tape);
        let ctx = CellContext {
            pv: &pv,
            argru: &self.argru,
            field: &self.field,
            time_encoder: &self.time,
            solver: &self.solver,
            space: Space::Manifold,
            layout: &self.layout,
            scale: TimeScale { mean: 70.0, std: 8.0 },
            flags,
        };
        let hv = tape.constant(h.to_tensor());
        let ev = tape.constant(e.to_tensor());
        let age = (t0 - 70.0) / 8.0;
        let s = ctx.traced_step(&mut tape, hv, ev, t0, t1, age).unwrap();
        (tape.value(s.evolved).clone(), tape.value(s.state).clone())
    }
}

fn point(dim: usize, raw: &[f64]) -> CholPoint<f64> {
    let mut t = Tensor::zeros(&[dim, dim]);
    let mut k = 0;
    for i in 0..dim {
        for j in 0..=i {
            t.set(i, j, if i == j { raw[k].exp() } else { 3.0 * raw[k] });
            k += 1;
        }
    }
    CholPoint::from_tensor(&t).unwrap()
}

fn gates() -> impl Strategy<Value = CellFlags> {
    (0usize..3, any::<bool>(), any::<bool>()).prop_map(|(g, scaling, aware)| CellFlags {
        gate: [GateKind::Attention, GateKind::PlainWfm, GateKind::None][g],
        interval_scaling: scaling,
        time_aware: aware,
        tnode: true,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn cell_steps_stay_on_the_manifold(
        q in 1usize..=4,
        seed in any::<u64>(),
        // much larger weights overflow f64 inside exp before closure is in question
        std in 0.01f64..1.5,
        raw in prop::collection::vec(-3.0f64..3.0, 20),
        t0 in 55.0f64..90.0,
        dt in 0.0f64..4.0,
        flags in gates(),
    ) {
        let n = q * (q + 1) / 2;
        let net = Net::new(q, std, seed);
        let h = point(q, &raw[..n]);
        let e = point(q, &raw[10..10 + n]);
        let (evolved, state) = net.step(flags, &h, &e, t0, t0 + dt);
        prop_assert!(CholPoint::from_tensor(&evolved).is_ok(), "evolved: {:?}", evolved);
        prop_assert!(CholPoint::from_tensor(&state).is_ok(), "state: {:?}", state);
    }
}

#[test]
fn zero_interval_evolution_is_identity() {
    let net = Net::new(3, 1.0, 4);
    let h = point(3, &[0.3, 0.2, -0.1, 0.5, 0.0, 0.7]);
    let flags = CellFlags {
        gate: GateKind::None,
        ..CellFlags::default()
    };
    let (evolved, state) = net.step(flags, &h, &h, 71.0, 71.0);
    assert_eq!(evolved, h.to_tensor());
    assert_eq!(state, h.to_tensor());
}

#[test]
fn zero_field_evolution_is_identity() {
    let mut net = Net::new(3, 1.0, 5);
    for id in [net.field.w2, net.field.b2] {
        let shape = net.store.get(id).shape().to_vec();
        *net.store.get_mut(id) = Tensor::zeros(&shape);
    }
    let h = point(3, &[0.3, 0.2, -0.1, 0.5, 0.0, 0.7]);
    let flags = CellFlags {
        gate: GateKind::None,
        ..CellFlags::default()
    };
    let (evolved, _) = net.step(flags, &h, &h, 70.0, 72.5);
    assert_eq!(evolved, h.to_tensor());
}

fn sin_error(method: Method, n: usize) -> f64 {
    let mut sys = FnSystem {
        f: |t: f64, y: &[f64]| vec![t.sin() * y[0]],
    };
    let y = integrate_steps(&mut sys, method, 0.0, 3.0, n, &vec![1.0]).unwrap();
    (y[0] - (1.0 - 3f64.cos()).exp()).abs()
}

fn slope(method: Method, ns: &[usize]) -> f64 {
    let pts: Vec<(f64, f64)> = ns.iter().map(|&n| ((3.0 / n as f64).ln(), sin_error(method, n).ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn rk4_is_fourth_order() {
    let s = slope(Method::Rk4, &[10, 20, 40, 80]);
    assert!((3.7..=4.3).contains(&s), "slope {s}");
}

#[test]
fn euler_is_first_order() {
    let s = slope(Method::Euler, &[100, 200, 400, 800, 1600]);
    assert!((0.8..=1.2).contains(&s), "slope {s}");
}

#[test]
fn solver_identities_are_exact() {
    let y0 = vec![1.5, -0.25];
    for method in [Method::Euler, Method::Rk4] {
        let cfg = SolverConfig { method, h_max: 0.1 };
        let mut zero = FnSystem {
            f: |_t: f64, y: &[f64]| vec![0.0; y.len()],
        };
        assert_eq!(integrate(&mut zero, &cfg, 0.0, 2.0, &y0).unwrap(), y0);
        let mut growth = FnSystem {
            f: |_t: f64, y: &[f64]| y.to_vec(),
        };
        assert_eq!(integrate(&mut growth, &cfg, 2.0, 2.0, &y0).unwrap(), y0);
        assert!(integrate(&mut growth, &cfg, 2.0, 1.0, &y0).is_err());
    }
}

#[test]
fn rk4_is_exact_on_cubics() {
    // dy/dt = 3t², y(0) = 0: one step reproduces t³
    let mut sys = FnSystem {
        f: |t: f64, _y: &[f64]| vec![3.0 * t * t],
    };
    let y = integrate_steps(&mut sys, Method::Rk4, 0.0, 2.0, 1, &vec![0.0]).unwrap();
    assert!((y[0] - 8.0).abs() < 1e-14);
}
