use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtnag::argru::{update, ArgruParams, CellContext, CellFlags, GateKind, GATE_FLOOR};
use rtnag::ode::SolverConfig;
use rtnag::params::{ParamStore, ParamVars};
use rtnag::space::{Space, TriLayout};
use rtnag::tnode::{evolve, time_coefficient, Evolution, OdeFieldParams, TimeEncoderParams, TimeScale};
use rtnag::{Tape, Tensor, Var};

struct Cell {
    store: ParamStore<f64>,
    argru: ArgruParams,
    field: OdeFieldParams,
    time: TimeEncoderParams,
    layout: TriLayout,
    solver: SolverConfig,
    flags: CellFlags,
}

impl Cell {
    fn new(q: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = TriLayout::new(q);
        let p = layout.packed_len();
        let mut store = ParamStore::new();
        let time = TimeEncoderParams::init(&mut store);
        let field = OdeFieldParams::init(&mut store, p, 8, &mut rng);
        let argru = ArgruParams::init(&mut store, p, &mut rng);
        Self {
            store,
            argru,
            field,
            time,
            layout,
            solver: SolverConfig::default(),
            flags: CellFlags::default(),
        }
    }

    fn set(&mut self, id: rtnag::params::ParamId, data: Vec<f64>) {
        let shape = self.store.get(id).shape().to_vec();
        *self.store.get_mut(id) = Tensor::new(shape, data).unwrap();
    }

    fn ctx<'a>(&'a self, pv: &'a ParamVars) -> CellContext<'a> {
        CellContext {
            pv,
            argru: &self.argru,
            field: &self.field,
            time_encoder: &self.time,
            solver: &self.solver,
            space: Space::Manifold,
            layout: &self.layout,
            scale: TimeScale { mean: 70.0, std: 5.0 },
            flags: self.flags,
        }
    }
}

fn mat(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn softplus(x: f64) -> f64 {
    x.exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn qkv_zero_and_identity_maps() {
    let mut cell = Cell::new(2);
    let e = mat(&[&[2.0, 0.0], &[0.7, 0.5]]);
    for w in [cell.argru.wq, cell.argru.wk, cell.argru.wv] {
        cell.set(w, vec![0.0; 9]);
    }
    let mut tape = Tape::new();
    let pv = cell.store.as_constants(&mut tape);
    let ev = tape.constant(e.clone());
    let (q, k, v) = cell.ctx(&pv).qkv(&mut tape, ev, ev).unwrap();
    for x in [q, k, v] {
        assert_eq!(tape.value(x), &Tensor::identity(2));
    }
    let eye = Tensor::identity(3).into_data();
    for w in [cell.argru.wq, cell.argru.wk, cell.argru.wv] {
        cell.set(w, eye.clone());
    }
    let mut tape = Tape::new();
    let pv = cell.store.as_constants(&mut tape);
    let i = tape.constant(Tensor::identity(2));
    let (q, _, _) = cell.ctx(&pv).qkv(&mut tape, i, i).unwrap();
    assert_eq!(tape.value(q), &Tensor::identity(2));
    let bad = tape.constant(Tensor::identity(3));
    assert!(cell.ctx(&pv).qkv(&mut tape, i, bad).is_err());
}

fn scalar_gate(cell: &Cell, v1: f64, dt: f64) -> f64 {
    let mut tape = Tape::new();
    let pv = cell.store.as_constants(&mut tape);
    let q = tape.constant(mat(&[&[1.3]]));
    let k = tape.constant(mat(&[&[0.4]]));
    let v = tape.constant(mat(&[&[v1]]));
    let z = cell.ctx(&pv).attention_gate(&mut tape, q, k, v, dt).unwrap();
    tape.scalar_value(z)
}

#[test]
fn single_entry_gate_is_decayed_sigmoid() {
    let mut cell = Cell::new(1);
    cell.set(cell.argru.theta, vec![0.3]);
    let z = scalar_gate(&cell, 0.8, 1.5);
    let want = sigmoid(0.8) * (-softplus(0.3) * 1.5).exp();
    assert!((z - want).abs() < 1e-15, "{z} vs {want}");
}

#[test]
fn vanishing_rate_leaves_the_sigmoid() {
    let mut cell = Cell::new(1);
    cell.set(cell.argru.theta, vec![-800.0]);
    assert_eq!(scalar_gate(&cell, 0.8, 2.0), sigmoid(0.8));
}

#[test]
fn long_intervals_close_the_gate() {
    let cell = Cell::new(1);
    assert!((scalar_gate(&cell, 0.8, 1e4) - GATE_FLOOR).abs() < 1e-15);
}

#[test]
fn saturated_gate_stays_below_one() {
    let mut cell = Cell::new(1);
    cell.flags.interval_scaling = false;
    let z = scalar_gate(&cell, 1e3, 0.5);
    assert!(z < 1.0);
    assert!((z - (1.0 - GATE_FLOOR)).abs() < 1e-15);
}

#[test]
fn gate_shrinks_with_interval() {
    let mut tape = Tape::new();
    let cell = Cell::new(3);
    let pv = cell.store.as_constants(&mut tape);
    let q = tape.constant(mat(&[&[1.0, 0.0, 0.0], &[0.3, 2.0, 0.0], &[-0.4, 0.1, 0.7]]));
    let k = tape.constant(mat(&[&[0.5, 0.0, 0.0], &[1.0, 1.0, 0.0], &[0.2, -0.9, 1.5]]));
    let v = tape.constant(mat(&[&[1.2, 0.0, 0.0], &[-0.5, 0.8, 0.0], &[0.6, 0.3, 2.0]]));
    let mut prev: Option<Tensor<f64>> = None;
    for dt in [0.0, 0.25, 1.0, 3.0, 10.0] {
        let z = cell.ctx(&pv).attention_gate(&mut tape, q, k, v, dt).unwrap();
        let z = tape.value(z).clone();
        for i in 0..3 {
            for j in 0..3 {
                let x = z.at(i, j);
                if j > i {
                    assert_eq!(x, 0.0);
                } else {
                    assert!(x > 0.0 && x < 1.0);
                    if let Some(p) = &prev {
                        assert!(x <= p.at(i, j));
                    }
                }
            }
        }
        prev = Some(z);
    }
    assert!(cell.ctx(&pv).attention_gate(&mut tape, q, k, v, -1.0).is_err());
}

#[test]
fn reset_and_candidate_at_the_identity() {
    let cell = Cell::new(2);
    let mut tape = Tape::new();
    let pv = cell.store.as_constants(&mut tape);
    let i = tape.constant(Tensor::identity(2));
    let ctx = cell.ctx(&pv);
    let r = ctx.reset_gate(&mut tape, i, i).unwrap();
    let want_r = mat(&[&[sigmoid(1.0), 0.0], &[0.5, sigmoid(1.0)]]);
    assert_eq!(tape.value(r), &want_r);
    assert!((sigmoid(1.0) - 0.7311).abs() < 1e-4);
    let r_id = tape.constant(Tensor::identity(2));
    let c = ctx.candidate(&mut tape, i, r_id, i).unwrap();
    let d = softplus(1.0);
    assert!((d - 1.3133).abs() < 1e-4);
    assert_eq!(tape.value(c), &mat(&[&[d, 0.0], &[0.0, d]]));
}

#[test]
fn update_is_entrywise_convex() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::identity(2));
    let bar = tape.constant(mat(&[&[3.0, 0.0], &[0.0, 3.0]]));
    let half = tape.constant(mat(&[&[0.5, 0.0], &[0.5, 0.5]]));
    let out = update(&mut tape, h, bar, half).unwrap();
    assert_eq!(tape.value(out), &mat(&[&[2.0, 0.0], &[0.0, 2.0]]));
    let closed = tape.constant(Tensor::zeros(&[2, 2]));
    let out = update(&mut tape, h, bar, closed).unwrap();
    assert_eq!(tape.value(out), tape.value(h));
}

fn example_points(tape: &mut Tape<f64>) -> (Var, Var) {
    let h = tape.constant(mat(&[&[1.1, 0.0, 0.0], &[0.2, 0.9, 0.0], &[-0.3, 0.4, 1.6]]));
    let e = tape.constant(mat(&[&[0.7, 0.0, 0.0], &[0.5, 1.4, 0.0], &[0.1, -0.2, 0.8]]));
    (h, e)
}

#[test]
fn cell_step_is_the_composition_of_its_parts() {
    let cell = Cell::new(3);
    let mut tape = Tape::new();
    let pv = cell.store.as_constants(&mut tape);
    let ctx = cell.ctx(&pv);
    let (h, e) = example_points(&mut tape);
    let (t0, t1, age) = (70.0, 71.5, 0.0);
    let got = ctx.cell_step(&mut tape, h, e, t0, t1, age).unwrap();

    let evolved = ctx.evolve(&mut tape, h, t0, t1, age).unwrap();
    let (q, k, v) = ctx.qkv(&mut tape, evolved, e).unwrap();
    let z = ctx.attention_gate(&mut tape, q, k, v, t1 - t0).unwrap();
    let r = ctx.reset_gate(&mut tape, e, evolved).unwrap();
    let c = ctx.candidate(&mut tape, e, r, evolved).unwrap();
    let want = update(&mut tape, evolved, c, z).unwrap();
    assert_eq!(tape.value(got), tape.value(want));
}

#[test]
fn closed_gate_sequence_is_pure_evolution() {
    let mut cell = Cell::new(3);
    cell.flags.gate = GateKind::None;
    let mut tape = Tape::new();
    let pv = cell.store.as_constants(&mut tape);
    let ctx = cell.ctx(&pv);
    let (_, e) = example_points(&mut tape);
    let times = [70.0, 70.5, 72.0, 73.25];
    let obs: Vec<(f64, Var)> = times.iter().map(|&t| (t, e)).collect();
    let (steps, last) = ctx.run_sequence(&mut tape, &obs, 70.0, 75.0).unwrap();
    assert_eq!(steps.len(), times.len());

    let evo = Evolution {
        pv: &pv,
        field: &cell.field,
        solver: &cell.solver,
        space: Space::Manifold,
        layout: &cell.layout,
        scale: TimeScale { mean: 70.0, std: 5.0 },
    };
    let mut h = tape.constant(Tensor::identity(3));
    let mut t_prev = 70.0;
    for &t in times[1..].iter().chain([75.0].iter()) {
        let eps = time_coefficient(&mut tape, &pv, &cell.time, (t_prev - 70.0) / 5.0).unwrap();
        h = evolve(&mut tape, &evo, h, t_prev, t, eps).unwrap();
        t_prev = t;
    }
    let (a, b) = (tape.value(last), tape.value(h));
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-12));
}

#[test]
fn sequence_edge_cases() {
    let cell = Cell::new(2);
    let mut tape = Tape::new();
    let pv = cell.store.as_constants(&mut tape);
    let ctx = cell.ctx(&pv);
    let e = tape.constant(mat(&[&[0.7, 0.0], &[0.5, 1.4]]));

    let (steps, last) = ctx.run_sequence(&mut tape, &[], 70.0, 72.0).unwrap();
    assert!(steps.is_empty());
    let i = tape.constant(Tensor::identity(2));
    let want = ctx.evolve(&mut tape, i, 70.0, 72.0, 0.0).unwrap();
    assert_eq!(tape.value(last), tape.value(want));

    let (steps, last) = ctx.run_sequence(&mut tape, &[(71.0, e)], 71.0, 71.0).unwrap();
    assert_eq!(tape.value(last), tape.value(steps[0].state));

    assert!(ctx.run_sequence(&mut tape, &[(71.0, e), (71.0, e)], 71.0, 72.0).is_err());
    assert!(ctx.run_sequence(&mut tape, &[(72.0, e), (71.0, e)], 71.0, 73.0).is_err());
    assert!(ctx.run_sequence(&mut tape, &[(71.0, e)], 71.0, 70.0).is_err());
}

#[test]
fn identical_inputs_give_identical_trajectories() {
    let run = || {
        let cell = Cell::new(3);
        let mut tape = Tape::new();
        let pv = cell.store.as_constants(&mut tape);
        let (_, e) = example_points(&mut tape);
        let obs = [(70.0, e), (71.0, e), (73.0, e)];
        let (_, last) = cell.ctx(&pv).run_sequence(&mut tape, &obs, 70.0, 74.0).unwrap();
        tape.value(last).clone()
    };
    assert_eq!(run(), run());
}
