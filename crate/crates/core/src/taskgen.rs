//! Synthetic geometric-construction micro-tasks.
//!
//! Four template families, each with a question raster, an auxiliary
//! raster (question plus exactly one constructed element), a short plan
//! from a closed grammar, and an answer with a closed-form oracle:
//!
//! * `connect-midline-area`: right triangle with legs `b`, `c`; connect
//!   the midpoints of the two legs; the cut-off triangle has area `b*c/8`.
//! * `reflect-shortest-path`: points at heights `a` and `b` above a mirror
//!   line, horizontal distance `d`; reflecting one point turns the
//!   shortest bounce path into the straight segment of length
//!   `sqrt(d^2 + (a+b)^2)` (parameters drawn from Pythagorean triples).
//! * `parallel-angle-transfer`: transversal across parallel lines with
//!   angle `theta`; the transferred angle is `theta` (alternate) or
//!   `180 - theta` (co-interior).
//! * `unfold-surface-distance`: box face `w` by `h`; the unfolded straight
//!   path is `sqrt(w^2 + h^2)`, an integer for triple pairs or `w*sqrt(2)`
//!   on the diagonal family.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::vision::Raster;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const CANVAS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    ConnectMidlineArea,
    ReflectShortestPath,
    ParallelAngleTransfer,
    UnfoldSurfaceDistance,
}

pub const ALL_KINDS: [TemplateKind; 4] = [
    TemplateKind::ConnectMidlineArea,
    TemplateKind::ReflectShortestPath,
    TemplateKind::ParallelAngleTransfer,
    TemplateKind::UnfoldSurfaceDistance,
];

impl TemplateKind {
    pub fn name(&self) -> &'static str {
        match self {
            TemplateKind::ConnectMidlineArea => "connect-midline-area",
            TemplateKind::ReflectShortestPath => "reflect-shortest-path",
            TemplateKind::ParallelAngleTransfer => "parallel-angle-transfer",
            TemplateKind::UnfoldSurfaceDistance => "unfold-surface-distance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionType {
    FreeForm,
    MultipleChoice,
}

/// Raw template parameters; the oracle recomputes answers from these alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskParams {
    Midline { b: i64, c: i64 },
    Reflect { a: i64, b: i64, d: i64 },
    Angle { theta: i64, alternate: bool },
    Unfold { w: i64, h: i64 },
}

/// One synthetic geometry problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub kind: TemplateKind,
    pub params: TaskParams,
    /// Question as surface tokens from the closed vocabulary.
    pub question: Vec<String>,
    pub question_raster: Raster,
    /// Absent only in hand-built datasets; generated instances always
    /// carry it.
    #[serde(default)]
    pub aux_raster: Option<Raster>,
    /// Plan tokens from the closed plan grammar.
    pub plan: Vec<String>,
    /// Ground-truth answer: a value for free-form, an option letter for
    /// multiple choice.
    pub answer: String,
    pub question_type: QuestionType,
    /// Option values in A..D order for multiple-choice instances.
    pub options: Option<Vec<String>>,
}

fn isqrt_exact(n: i64) -> Option<i64> {
    let r = (n as f64).sqrt().round() as i64;
    (r * r == n).then_some(r)
}

/// Value the template's closed form assigns to these parameters,
/// independent of anything stored on an instance.
pub fn oracle_value(params: &TaskParams) -> Result<String> {
    match params {
        TaskParams::Midline { b, c } => {
            if b <= &0 || c <= &0 || (b * c) % 8 != 0 {
                return Err(Error::Data(format!("malformed midline params b={b} c={c}")));
            }
            Ok(((b * c) / 8).to_string())
        }
        TaskParams::Reflect { a, b, d } => {
            if *a <= 0 || *b <= 0 || *d <= 0 {
                return Err(Error::Data("malformed reflect params".into()));
            }
            let s = a + b;
            let hyp = isqrt_exact(d * d + s * s)
                .ok_or_else(|| Error::Data(format!("non-integer hypotenuse for d={d}, s={s}")))?;
            Ok(hyp.to_string())
        }
        TaskParams::Angle { theta, alternate } => {
            if !(1..180).contains(theta) {
                return Err(Error::Data(format!("malformed angle {theta}")));
            }
            Ok(if *alternate { *theta } else { 180 - theta }.to_string())
        }
        TaskParams::Unfold { w, h } => {
            if *w <= 0 || *h <= 0 {
                return Err(Error::Data("malformed unfold params".into()));
            }
            if w == h {
                Ok(format!("{w}\\sqrt{{2}}"))
            } else {
                let hyp = isqrt_exact(w * w + h * h)
                    .ok_or_else(|| Error::Data(format!("non-integer distance for w={w}, h={h}")))?;
                Ok(hyp.to_string())
            }
        }
    }
}

/// Independent recomputation of an instance's ground truth. For
/// multiple-choice instances this is the correct option *value*; the
/// stored answer letter must point at it.
pub fn solve_oracle(instance: &TaskInstance) -> Result<String> {
    oracle_value(&instance.params)
}

enum Stroke {
    Line(i64, i64, i64, i64),
    Mark(i64, i64),
}

fn draw(raster: &mut Raster, stroke: &Stroke) -> Result<()> {
    match *stroke {
        Stroke::Line(x0, y0, x1, y1) => raster.line(x0, y0, x1, y1),
        Stroke::Mark(x, y) => {
            raster.set(x, y)?;
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < raster.size && (ny as usize) < raster.size {
                    raster.set(nx, ny)?;
                }
            }
            Ok(())
        }
    }
}

fn geometry(params: &TaskParams) -> (Vec<Stroke>, Vec<Stroke>) {
    match *params {
        TaskParams::Midline { b, c } => {
            let (ax, ay) = (1i64, 13i64);
            let base = vec![
                Stroke::Line(ax, ay, ax + b, ay),
                Stroke::Line(ax, ay, ax, ay - c),
                Stroke::Line(ax + b, ay, ax, ay - c),
            ];
            let aux = vec![Stroke::Line(ax + b / 2, ay, ax, ay - c / 2)];
            (base, aux)
        }
        TaskParams::Reflect { a, b, d } => {
            let axis_y = 10i64;
            let (px, py) = (2i64, axis_y - a);
            let (qx, qy) = (2 + d, axis_y - b);
            let base = vec![
                Stroke::Line(0, axis_y, CANVAS as i64 - 1, axis_y),
                Stroke::Mark(px, py),
                Stroke::Mark(qx, qy),
            ];
            let aux = vec![Stroke::Line(px, py, qx, axis_y + b)];
            (base, aux)
        }
        TaskParams::Angle { .. } => {
            let base = vec![
                Stroke::Line(0, 3, CANVAS as i64 - 1, 3),
                Stroke::Line(0, 12, CANVAS as i64 - 1, 12),
                Stroke::Line(4, 3, 10, 12),
            ];
            let aux = vec![Stroke::Line(4, 3, 2, 0)];
            (base, aux)
        }
        TaskParams::Unfold { w, h } => {
            let (x0, y0) = (1i64, 13i64);
            let base = vec![
                Stroke::Line(x0, y0, x0 + w, y0),
                Stroke::Line(x0 + w, y0, x0 + w, y0 - h),
                Stroke::Line(x0 + w, y0 - h, x0, y0 - h),
                Stroke::Line(x0, y0 - h, x0, y0),
            ];
            let aux = vec![Stroke::Line(x0, y0, x0 + w, y0 - h)];
            (base, aux)
        }
    }
}

/// Rasterize an instance's geometry, optionally with the auxiliary stroke.
pub fn render_diagram(params: &TaskParams, with_aux: bool) -> Result<Raster> {
    let mut raster = Raster::new(CANVAS);
    let (base, aux) = geometry(params);
    for s in &base {
        draw(&mut raster, s)?;
    }
    if with_aux {
        for s in &aux {
            draw(&mut raster, s)?;
        }
    }
    Ok(raster)
}

fn sample_params(kind: TemplateKind, rng: &mut rand_chacha::ChaCha12Rng) -> TaskParams {
    match kind {
        TemplateKind::ConnectMidlineArea => loop {
            let b = 2 * rng.gen_range(2..=6i64);
            let c = 2 * rng.gen_range(2..=6i64);
            if (b * c) % 8 == 0 {
                return TaskParams::Midline { b, c };
            }
        },
        TemplateKind::ReflectShortestPath => {
            const TRIPLES: [(i64, i64); 6] = [(3, 4), (4, 3), (6, 8), (8, 6), (12, 5), (5, 12)];
            let (d, s) = TRIPLES[rng.gen_range(0..TRIPLES.len())];
            // split s into a + b with both marks on-canvas
            let b_lo = (s - 10).max(1);
            let b_hi = (s - 1).min(4);
            let b = rng.gen_range(b_lo..=b_hi);
            TaskParams::Reflect { a: s - b, b, d }
        }
        TemplateKind::ParallelAngleTransfer => TaskParams::Angle {
            theta: rng.gen_range(15..=75),
            alternate: rng.gen_bool(0.5),
        },
        TemplateKind::UnfoldSurfaceDistance => {
            const PAIRS: [(i64, i64); 11] = [
                (3, 4),
                (4, 3),
                (6, 8),
                (8, 6),
                (12, 5),
                (5, 12),
                (3, 3),
                (4, 4),
                (5, 5),
                (6, 6),
                (7, 7),
            ];
            let (w, h) = PAIRS[rng.gen_range(0..PAIRS.len())];
            TaskParams::Unfold { w, h }
        }
    }
}

fn question_tokens(params: &TaskParams) -> Vec<String> {
    let s = |x: &str| x.to_string();
    match params {
        TaskParams::Midline { b, c } => vec![
            s("tri"),
            s("legs"),
            b.to_string(),
            s(","),
            c.to_string(),
            s(","),
            s("mid"),
            s("area"),
        ],
        TaskParams::Reflect { a, b, d } => vec![
            s("path"),
            s("P"),
            s("="),
            a.to_string(),
            s(","),
            s("Q"),
            s("="),
            b.to_string(),
            s(","),
            s("d"),
            s("="),
            d.to_string(),
        ],
        TaskParams::Angle { theta, alternate } => vec![
            s("par"),
            s("angle"),
            theta.to_string(),
            s(if *alternate { "alt" } else { "co" }),
        ],
        TaskParams::Unfold { w, h } => vec![
            s("box"),
            s("w"),
            w.to_string(),
            s("h"),
            h.to_string(),
            s("dist"),
        ],
    }
}

fn plan_tokens(kind: TemplateKind) -> Vec<String> {
    let s = |x: &str| x.to_string();
    match kind {
        TemplateKind::ConnectMidlineArea => vec![s("connect"), s("M"), s("N")],
        TemplateKind::ReflectShortestPath => vec![
            s("reflect"),
            s("Q"),
            s("axis"),
            s("then"),
            s("connect"),
            s("P"),
            s("Q"),
        ],
        TemplateKind::ParallelAngleTransfer => vec![s("extend"), s("line"), s("to"), s("par")],
        TemplateKind::UnfoldSurfaceDistance => {
            vec![s("unfold"), s("box"), s("then"), s("connect"), s("P"), s("Q")]
        }
    }
}

fn distractors(value: &str, rng: &mut rand_chacha::ChaCha12Rng) -> Vec<String> {
    if let Some(stripped) = value.strip_suffix("\\sqrt{2}") {
        let k: i64 = stripped.parse().unwrap_or(2);
        return vec![
            format!("{}\\sqrt{{2}}", k + 1),
            format!("{}\\sqrt{{2}}", (k - 1).max(1)),
            k.to_string(),
        ];
    }
    let n: i64 = value.parse().unwrap_or(0);
    let mut picks = Vec::new();
    let mut deltas: Vec<i64> = vec![-3, -2, -1, 1, 2, 3, 4];
    deltas.shuffle(rng);
    for d in deltas {
        let v = n + d;
        if v >= 0 && v <= 200 && v != n && !picks.contains(&v) {
            picks.push(v);
            if picks.len() == 3 {
                break;
            }
        }
    }
    picks.into_iter().map(|v| v.to_string()).collect()
}

/// Deterministically generate one instance from `(kind, seed)`.
pub fn generate_task(kind: TemplateKind, seed: u64) -> Result<TaskInstance> {
    let mut rng = rng_for(seed, &[0x7a51, kind as u64]);
    let params = sample_params(kind, &mut rng);
    let value = oracle_value(&params)?;
    let mut question = question_tokens(&params);
    let multiple_choice = rng.gen_bool(1.0 / 3.0);
    let (answer, question_type, options) = if multiple_choice {
        let mut opts = distractors(&value, &mut rng);
        let slot = rng.gen_range(0..=opts.len());
        opts.insert(slot, value.clone());
        let letter = ["A", "B", "C", "D"][slot].to_string();
        question.push("opts".to_string());
        for (i, opt) in opts.iter().enumerate() {
            question.push(["A", "B", "C", "D"][i].to_string());
            question.push(opt.clone());
        }
        (letter, QuestionType::MultipleChoice, Some(opts))
    } else {
        (value, QuestionType::FreeForm, None)
    };
    question.push("?".to_string());

    let question_raster = render_diagram(&params, false)?;
    let aux_raster = render_diagram(&params, true)?;
    debug_assert!(aux_raster.diff_count(&question_raster) >= 1);
    let aux_raster = Some(aux_raster);
    Ok(TaskInstance {
        id: seed,
        kind,
        params,
        question,
        question_raster,
        aux_raster,
        plan: plan_tokens(kind),
        answer,
        question_type,
        options,
    })
}

/// Generate `count` instances cycling over the template kinds.
pub fn generate_dataset(count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let kind = ALL_KINDS[i % ALL_KINDS.len()];
        let mut inst = generate_task(kind, derive_seed(seed, &[0xda7a, i as u64]))?;
        inst.id = i as u64;
        out.push(inst);
    }
    Ok(out)
}

/// Disjoint, seed-deterministic split stratified by template kind.
pub fn split_dataset(
    instances: &[TaskInstance],
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    if instances.is_empty() {
        return Err(Error::Data("cannot split an empty instance list".into()));
    }
    if (fractions.0 + fractions.1 - 1.0).abs() > 1e-9 || fractions.0 < 0.0 || fractions.1 < 0.0 {
        return Err(Error::Data(format!(
            "fractions {:?} must be non-negative and sum to 1",
            fractions
        )));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for kind in ALL_KINDS {
        let mut idx: Vec<usize> = instances
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind == kind)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng_for(seed, &[0x5b11, kind as u64]);
        idx.shuffle(&mut rng);
        let take = (fractions.0 * idx.len() as f64).round() as usize;
        for (j, i) in idx.into_iter().enumerate() {
            if j < take {
                train.push(instances[i].clone());
            } else {
                eval.push(instances[i].clone());
            }
        }
    }
    train.sort_by_key(|t| t.id);
    eval.sort_by_key(|t| t.id);
    Ok((train, eval))
}

/// One instance per line as JSON.
pub fn write_dataset(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    #[test]
    fn reflect_triple_closed_form() {
        // legs (3, 4) -> 5
        let p = TaskParams::Reflect { a: 3, b: 1, d: 3 };
        assert_eq!(oracle_value(&p).unwrap(), "5");
    }

    #[test]
    fn same_seed_same_instance() {
        let a = generate_task(TemplateKind::ReflectShortestPath, 123).unwrap();
        let b = generate_task(TemplateKind::ReflectShortestPath, 123).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn oracle_matches_stored_answers_over_many_samples() {
        for i in 0..2000u64 {
            let kind = ALL_KINDS[(i % 4) as usize];
            let inst = generate_task(kind, 10_000 + i).unwrap();
            let value = solve_oracle(&inst).unwrap();
            match inst.question_type {
                QuestionType::FreeForm => assert_eq!(inst.answer, value),
                QuestionType::MultipleChoice => {
                    let letter_idx = ["A", "B", "C", "D"]
                        .iter()
                        .position(|l| *l == inst.answer)
                        .unwrap();
                    assert_eq!(inst.options.as_ref().unwrap()[letter_idx], value);
                }
            }
            // oracle is pure
            assert_eq!(solve_oracle(&inst).unwrap(), value);
        }
    }

    #[test]
    fn aux_raster_is_pixel_superset() {
        for i in 0..200u64 {
            let kind = ALL_KINDS[(i % 4) as usize];
            let inst = generate_task(kind, 777 + i).unwrap();
            let aux = inst.aux_raster.as_ref().unwrap();
            assert!(aux.is_superset_of(&inst.question_raster));
            assert!(aux.diff_count(&inst.question_raster) >= 1);
        }
    }

    #[test]
    fn rendering_is_deterministic_and_differs_exactly_on_aux() {
        let inst = generate_task(TemplateKind::UnfoldSurfaceDistance, 5).unwrap();
        let q1 = render_diagram(&inst.params, false).unwrap();
        let q2 = render_diagram(&inst.params, false).unwrap();
        assert_eq!(q1, q2);
        let a = render_diagram(&inst.params, true).unwrap();
        assert_eq!(q1, inst.question_raster);
        assert_eq!(Some(a.clone()), inst.aux_raster);
        assert!(a.diff_count(&q1) >= 1);
    }

    #[test]
    fn question_and_plan_tokens_are_in_vocabulary() {
        let v = Vocabulary::new();
        for i in 0..400u64 {
            let kind = ALL_KINDS[(i % 4) as usize];
            let inst = generate_task(kind, 31_000 + i).unwrap();
            let joined = inst.question.join(" ");
            v.encode(&joined).unwrap_or_else(|e| panic!("question {joined:?}: {e}"));
            v.encode(&inst.plan.join(" ")).unwrap();
            // answers are encodable inside a boxed region
            v.encode(&format!("\\boxed{{{}}}", inst.answer)).unwrap();
        }
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let data = generate_dataset(500, 9).unwrap();
        let (train, eval) = split_dataset(&data, (0.8, 0.2), 4).unwrap();
        assert_eq!(train.len() + eval.len(), 500);
        assert_eq!(train.len(), 400);
        for kind in ALL_KINDS {
            let total = data.iter().filter(|t| t.kind == kind).count() as f64;
            let in_train = train.iter().filter(|t| t.kind == kind).count() as f64;
            assert!((in_train - 0.8 * total).abs() <= 1.0, "kind {kind:?}");
        }
        let (t2, e2) = split_dataset(&data, (0.8, 0.2), 4).unwrap();
        assert_eq!(train.len(), t2.len());
        assert!(train.iter().zip(&t2).all(|(a, b)| a.id == b.id));
        assert!(eval.iter().zip(&e2).all(|(a, b)| a.id == b.id));
    }

    #[test]
    fn split_all_or_nothing() {
        let data = generate_dataset(40, 1).unwrap();
        let (train, eval) = split_dataset(&data, (1.0, 0.0), 2).unwrap();
        assert_eq!(train.len(), 40);
        assert!(eval.is_empty());
        assert!(split_dataset(&[], (0.5, 0.5), 2).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let data = generate_dataset(12, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_dataset(&path, &data).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 12);
        assert_eq!(
            serde_json::to_string(&loaded[5]).unwrap(),
            serde_json::to_string(&data[5]).unwrap()
        );
    }

    #[test]
    fn empty_geometry_renders_zero_raster() {
        let r = Raster::new(CANVAS);
        assert!(r.pixels.iter().all(|p| *p == 0));
    }
}
