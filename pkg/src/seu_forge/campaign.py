"""Statistically sized fault campaigns and their evaluation metrics.

Campaign determinism contract: the fault list is generated serially from the
plan seed, evaluation may be distributed over workers (each owning a private
parameter copy), and aggregation is order-independent, so reports are
byte-identical for any worker count.
"""

from __future__ import annotations

import csv
import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import run_float, run_quantized
from .faults import (FaultOutcome, FaultSpec, apply_fault, inject_and_measure,
                     revert, target_psets)
from .model import ModelGraph, batch_inputs, model_hash
from .tensor import INVALID_CLASS, ShapeError, Tensor

# ---------------------------------------------------------------------------
# sample sizing (statistical fault injection)


def sample_size(N: int, e: float, t: float, p: float) -> int:
    """Minimum injections for a statistically significant campaign.

    n = N / (1 + e^2 * (N-1) / (t^2 * p * (1-p))), rounded up, clamped to N.
    """
    if N < 1:
        raise ValueError(f"fault space size N must be >= 1, got {N}")
    if not 0 < e < 1:
        raise ValueError(f"error margin e must be in (0, 1), got {e}")
    if t <= 0:
        raise ValueError(f"confidence cut-off t must be positive, got {t}")
    if not 0 < p < 1:
        raise ValueError(f"prior p must be in (0, 1), got {p}")
    n = N / (1.0 + e * e * (N - 1) / (t * t * p * (1.0 - p)))
    return min(N, max(1, math.ceil(n)))


# ---------------------------------------------------------------------------
# error rate and segmentation metrics


def error_rate(golden: np.ndarray, faulty: np.ndarray) -> float:
    """Percent of pixels whose predicted class differs from the golden map.

    INVALID (NaN-poisoned) pixels mismatch everything, including INVALID.
    """
    golden = np.asarray(golden)
    faulty = np.asarray(faulty)
    if golden.shape != faulty.shape:
        raise ShapeError(f"class map shapes differ: {golden.shape} vs {faulty.shape}")
    mismatch = (golden != faulty) | (golden == INVALID_CLASS) | (faulty == INVALID_CLASS)
    return 100.0 * float(mismatch.sum()) / mismatch.size


@dataclass
class MetricBundle:
    """Per-class and aggregate segmentation metrics, all in percent.

    "Global" is the micro-average over pixels; "Weighted" is the
    label-frequency-weighted mean of the per-class metrics. Vacuous
    denominators (class absent and never predicted) score 100.
    """

    per_class_recall: list
    per_class_precision: list
    per_class_iou: list
    global_recall: float
    global_precision: float
    global_iou: float
    weighted_recall: float
    weighted_precision: float
    weighted_iou: float
    error_rate: float = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def segmentation_metrics(prediction: np.ndarray, labels: np.ndarray,
                         class_count: int) -> MetricBundle:
    prediction = np.asarray(prediction)
    labels = np.asarray(labels)
    if prediction.shape != labels.shape:
        raise ShapeError(f"prediction/label shapes differ: {prediction.shape} vs {labels.shape}")
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError(f"label map contains class outside [0, {class_count})")

    pred = prediction.ravel()
    lab = labels.ravel()
    valid = (pred >= 0) & (pred < class_count)
    # confusion[i, j]: label i predicted as j; INVALID predictions live in an
    # extra per-row "invalid" count so recall denominators stay exact.
    conf = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(conf, (lab[valid], pred[valid]), 1)
    invalid_per_label = np.bincount(lab[~valid], minlength=class_count).astype(np.int64)

    tp = np.diag(conf).astype(np.float64)
    label_totals = conf.sum(axis=1) + invalid_per_label
    pred_totals = conf.sum(axis=0)
    fn = label_totals - tp
    fp = pred_totals - tp

    def safe(num, den):
        return np.where(den > 0, 100.0 * num / np.maximum(den, 1), 100.0)

    recall = safe(tp, tp + fn)
    precision = safe(tp, tp + fp)
    iou = safe(tp, tp + fn + fp)

    total = lab.size
    correct = tp.sum()
    g_acc = 100.0 * correct / total
    g_iou = 100.0 * correct / (correct + fn.sum() + fp.sum())

    weights = label_totals / total
    return MetricBundle(
        per_class_recall=[float(x) for x in recall],
        per_class_precision=[float(x) for x in precision],
        per_class_iou=[float(x) for x in iou],
        global_recall=float(g_acc),
        global_precision=float(100.0 * correct / max(correct + fp.sum(), 1)),
        global_iou=float(g_iou),
        weighted_recall=float(np.dot(weights, recall)),
        weighted_precision=float(np.dot(weights, precision)),
        weighted_iou=float(np.dot(weights, iou)),
    )


# ---------------------------------------------------------------------------
# analytic predictors (output-conv bit-30 / sign-bit error rates)


def golden_class_shares(class_maps, class_count: int) -> np.ndarray:
    """Percent of pixels per class, pooled over the golden maps."""
    counts = np.zeros(class_count, dtype=np.int64)
    total = 0
    for m in class_maps:
        m = np.asarray(m)
        counts += np.bincount(m[m >= 0].ravel(), minlength=class_count)[:class_count]
        total += m.size
    return 100.0 * counts / total


def predict_bit30_error(output_bias_signs, class_shares) -> float:
    """Expected error rate of a bit-30 flip in a uniformly chosen output bias.

    A flip in a negative bias suppresses its class (the class-j pixels
    change: share_j); in a positive bias the class floods the map (everything
    else changes: 100 - share_j). The estimate is the mean per-class addend.
    """
    signs = np.asarray(output_bias_signs, dtype=np.float64)
    shares = np.asarray(class_shares, dtype=np.float64)
    if signs.shape != shares.shape:
        raise ValueError(f"got {signs.size} signs but {shares.size} class shares")
    addends = np.where(signs > 0, 100.0 - shares, shares)
    return float(addends.mean())


@dataclass
class SignBitPrediction:
    estimate: float
    per_class: list
    high_variance: bool = True  # few biases + unbalanced terms; see report notes


def predict_sign_bit_error_quantized(output_bias_signs, class_shares) -> SignBitPrediction:
    """Sign-bit analogue: mechanisms invert, so addends are the complements
    of the bit-30 case (negative bias -> class floods -> 100 - share)."""
    signs = np.asarray(output_bias_signs, dtype=np.float64)
    shares = np.asarray(class_shares, dtype=np.float64)
    if signs.shape != shares.shape:
        raise ValueError(f"got {signs.size} signs but {shares.size} class shares")
    addends = np.where(signs > 0, shares, 100.0 - shares)
    return SignBitPrediction(float(addends.mean()), [float(a) for a in addends])


def weighted_bit_error(per_bit_rates: dict) -> float:
    """Single figure from per-bit rates: linear weights w_b ~ (b - lo + 1)
    over the covered range, normalized to sum 1."""
    if not per_bit_rates:
        raise ValueError("no per-bit rates given")
    lo = min(per_bit_rates)
    weights = {b: (b - lo + 1) for b in per_bit_rates}
    total = sum(weights.values())
    return sum(weights[b] * r for b, r in per_bit_rates.items()) / total


# ---------------------------------------------------------------------------
# campaign plans


@dataclass
class CampaignPlan:
    mode: str                    # "single_bit_sweep" | "multi_bit_random"
    seed: int
    targets: list = field(default_factory=list)   # pset indices
    bit_lo: int = 0
    bit_hi: int = 31
    injections_per_target: int = None             # explicit n; else statistical sizing
    margin: float = 0.025
    z_value: float = 1.96
    prior: float = 0.5
    image_set_id: str = ""
    counts: list = None                           # multi-bit flip counts
    repetitions: int = None

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in self.__dataclass_fields__},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CampaignPlan":
        return cls(**json.loads(text))


def plan_single_bit_sweep(graph: ModelGraph, *, roles=None, psets=None,
                          bits=(0, 31), injections_per_target=None,
                          margin=0.025, z_value=1.96, prior=0.5,
                          seed=0, image_set_id="") -> CampaignPlan:
    targets = target_psets(graph, roles, psets)
    if not targets:
        raise ValueError("sweep plan selects no parameter sets")
    lo, hi = int(bits[0]), int(bits[1])
    if lo > hi:
        raise ValueError(f"empty bit range [{lo}, {hi}]")
    for p in targets:
        if hi >= p.width:
            raise ValueError(
                f"bit range [{lo}-{hi}] exceeds p{p.index} ({p.tensor.encoding}, "
                f"{p.width} bits); restrict --bits to 0..{p.width - 1} or retarget")
    return CampaignPlan(mode="single_bit_sweep", seed=int(seed),
                        targets=[p.index for p in targets], bit_lo=lo, bit_hi=hi,
                        injections_per_target=injections_per_target,
                        margin=margin, z_value=z_value, prior=prior,
                        image_set_id=image_set_id)


def plan_multi_bit_campaign(graph: ModelGraph, counts, repetitions: int,
                            seed: int = 0, image_set_id: str = "") -> CampaignPlan:
    counts = [int(c) for c in counts]
    if not counts or any(c < 0 for c in counts):
        raise ValueError("flip counts must be a non-empty list of non-negative ints")
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    return CampaignPlan(mode="multi_bit_random", seed=int(seed),
                        targets=[p.index for p in graph.params],
                        counts=counts, repetitions=int(repetitions),
                        image_set_id=image_set_id)


def generate_sweep_faults(graph: ModelGraph, plan: CampaignPlan):
    """Serial, seed-deterministic fault list (without replacement per target)."""
    rng = np.random.Generator(np.random.PCG64(plan.seed))
    nbits = plan.bit_hi - plan.bit_lo + 1
    specs = []
    for index in plan.targets:
        p = graph.param(index)
        space = p.tensor.size * nbits
        n = plan.injections_per_target or sample_size(space, plan.margin,
                                                      plan.z_value, plan.prior)
        n = min(n, space)
        chosen = rng.choice(space, size=n, replace=False)
        chosen.sort()
        for flat in chosen:
            specs.append(FaultSpec(pset=index, element=int(flat) // nbits,
                                   bit=plan.bit_lo + int(flat) % nbits,
                                   encoding=p.tensor.encoding,
                                   seed_ordinal=len(specs)))
    return specs


# ---------------------------------------------------------------------------
# execution


def _forward_maps(graph: ModelGraph, batch: Tensor) -> np.ndarray:
    if graph.flags.get("quantized"):
        return run_quantized(graph, batch).class_map
    return run_float(graph, batch).class_map


def _errors_vs_golden(graph: ModelGraph, batch: Tensor, golden: np.ndarray):
    maps = _forward_maps(graph, batch)
    return [error_rate(golden[i], maps[i]) for i in range(maps.shape[0])]


def _sweep_chunk(args):
    graph, specs, batch, golden = args
    work = graph.copy()
    out = []
    for spec in specs:
        try:
            out.append(inject_and_measure(
                work, spec, lambda g: _errors_vs_golden(g, batch, golden)))
        except Exception as exc:  # per-fault failures are recorded, not fatal
            out.append(FaultOutcome(
                spec=spec, original_bits=0, faulty_bits=0,
                original_value=float("nan"), faulty_value=float("nan"),
                evaluation_error=f"{type(exc).__name__}: {exc}"))
    return out


def _multibit_chunk(args):
    graph, rep_specs, batch, golden = args
    work = graph.copy()
    out = []
    for specs in rep_specs:
        tokens = [apply_fault(work, s) for s in specs]
        try:
            errs = _errors_vs_golden(work, batch, golden)
        finally:
            for tok in reversed(tokens):
                revert(work, tok)
        out.append(float(np.mean(errs)) if errs else 0.0)
    return out


def _run_chunks(worker, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [worker(j) for j in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx) as ex:
        return list(ex.map(worker, jobs))


def _split(items, workers: int):
    if not items:
        return []
    k = max(1, min(workers, len(items)))
    bounds = np.linspace(0, len(items), k + 1).astype(int)
    return [items[a:b] for a, b in zip(bounds, bounds[1:]) if b > a]


@dataclass
class SweepResult:
    plan: CampaignPlan
    rows: list          # per-(pset, bit): n, mean_error, nan/inf counts
    outcomes: list
    golden_hash: str

    def table(self) -> dict:
        return {(r["pset"], r["bit"]): r["mean_error"] for r in self.rows}

    def write(self, directory, stem="sweep"):
        import os
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, f"{stem}_plan.json"), "w") as f:
            f.write(self.plan.to_json() + "\n")
        with open(os.path.join(directory, f"{stem}_outcomes.jsonl"), "w") as f:
            for o in self.outcomes:
                f.write(o.to_json() + "\n")
        write_sweep_csv(self.rows, os.path.join(directory, f"{stem}_aggregate.csv"))


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pset", "bit", "n", "mean_error", "nan_count", "inf_count"])
        for r in rows:
            w.writerow([r["pset"], r["bit"], r["n"], repr(r["mean_error"]),
                        r["nan_count"], r["inf_count"]])


def run_single_bit_sweep(graph: ModelGraph, plan: CampaignPlan, images,
                         workers: int = 1) -> SweepResult:
    """Apply/evaluate/revert every planned fault; aggregate per (pset, bit)."""
    if plan.mode != "single_bit_sweep":
        raise ValueError(f"plan mode {plan.mode!r} is not a single-bit sweep")
    batch = batch_inputs(images)
    golden = _forward_maps(graph, batch)
    specs = generate_sweep_faults(graph, plan)

    jobs = [(graph, chunk, batch, golden) for chunk in _split(specs, workers)]
    outcomes = [o for part in _run_chunks(_sweep_chunk, jobs, workers) for o in part]
    outcomes.sort(key=lambda o: o.spec.seed_ordinal)

    grouped = {}
    for o in outcomes:
        grouped.setdefault((o.spec.pset, o.spec.bit), []).append(o)
    rows = []
    for (pset, bit) in sorted(grouped):
        evaluated = [o for o in grouped[(pset, bit)] if o.evaluation_error is None]
        rows.append({"pset": pset, "bit": bit, "n": len(evaluated),
                     "mean_error": (float(np.mean([o.mean_error for o in evaluated]))
                                    if evaluated else None),
                     "nan_count": sum(o.produced_nan for o in evaluated),
                     "inf_count": sum(o.produced_inf for o in evaluated)})
    return SweepResult(plan, rows, outcomes, model_hash(graph))


def role_bit_means(graph: ModelGraph, result: SweepResult, bit: int) -> dict:
    """Mean error per role at one bit position (over that role's outcomes)."""
    by_role = {}
    for o in result.outcomes:
        if o.spec.bit != bit:
            continue
        role = graph.param(o.spec.pset).role
        by_role.setdefault(role, []).append(o.mean_error)
    return {role: (float(np.mean(v)), float(np.std(v)), len(v))
            for role, v in by_role.items()}


@dataclass
class MultiBitResult:
    counts: list
    means: list
    stds: list
    repetitions: int
    per_rep_errors: dict    # count -> list of per-repetition mean errors
    plan: CampaignPlan = None

    def write(self, directory, stem="multibit"):
        import os
        os.makedirs(directory, exist_ok=True)
        if self.plan is not None:
            with open(os.path.join(directory, f"{stem}_plan.json"), "w") as f:
                f.write(self.plan.to_json() + "\n")
        with open(os.path.join(directory, f"{stem}_aggregate.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["flip_count", "repetitions", "mean_error", "std_error"])
            for c, m, s in zip(self.counts, self.means, self.stds):
                w.writerow([c, self.repetitions, repr(m), repr(s)])
        with open(os.path.join(directory, f"{stem}_reps.json"), "w") as f:
            json.dump({str(k): v for k, v in self.per_rep_errors.items()},
                      f, sort_keys=True)


def _global_fault_space(graph: ModelGraph, roles=None):
    psets = target_psets(graph, roles=roles) if roles is not None else list(graph.params)
    spans = []
    offset = 0
    for p in psets:
        nbits = p.tensor.size * p.width
        spans.append((offset, p))
        offset += nbits
    return spans, offset


def _decode_global(spans, flat: int) -> FaultSpec:
    lo, hi = 0, len(spans) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if spans[mid][0] <= flat:
            lo = mid
        else:
            hi = mid - 1
    offset, p = spans[lo]
    within = flat - offset
    return FaultSpec(pset=p.index, element=within // p.width,
                     bit=within % p.width, encoding=p.tensor.encoding)


def run_multi_bit_campaign(graph: ModelGraph, counts, repetitions: int, seed: int,
                           images, workers: int = 1) -> MultiBitResult:
    """Random MBU campaign over the whole parameter fault space."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("flip counts must be non-negative")
    spans, space = _global_fault_space(graph)
    too_big = [c for c in counts if c > space]
    if too_big:
        raise ValueError(f"flip count {max(too_big)} exceeds fault space of {space} bits")

    rng = np.random.Generator(np.random.PCG64(seed))
    reps_by_count = {}
    for c in counts:
        reps = []
        for _ in range(repetitions):
            chosen = rng.choice(space, size=c, replace=False) if c else np.array([], dtype=int)
            reps.append([_decode_global(spans, int(i)) for i in chosen])
        reps_by_count[c] = reps

    batch = batch_inputs(images)
    golden = _forward_maps(graph, batch)

    per_rep = {}
    for c in counts:
        jobs = [(graph, chunk, batch, golden)
                for chunk in _split(reps_by_count[c], workers)]
        errs = [e for part in _run_chunks(_multibit_chunk, jobs, workers) for e in part]
        per_rep[c] = errs
    means = [float(np.mean(per_rep[c])) for c in counts]
    stds = [float(np.std(per_rep[c])) for c in counts]
    plan = plan_multi_bit_campaign(graph, counts, repetitions, seed)
    return MultiBitResult(counts, means, stds, repetitions, per_rep, plan)
