"""Experiment harness: gradient checks, gate ablations, stability, timing.

Every experiment is deterministic given its seed(s) and emits both a CSV
and a JSON mirror. The gradient check is the gatekeeper: the ablation
sweep and the stability probe refuse to run until the analytic BPTT
gradients of the cell kind in use have been verified against central
finite differences.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import engine
from .cells import GateMask
from .engine import TrainConfig
from .model import Model, ModelConfig
from .numeric import Rng

GRADCHECK_TOLERANCE = 1e-5
_FD_STEP = 1e-5


class GradcheckFailure(FloatingPointError):
    """Analytic gradients disagree with finite differences."""


class ProbeBoundViolation(AssertionError):
    """A state bound that must hold was violated during a probe."""


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradcheckReport:
    cell_kind: str
    d: int
    T: int
    vocab: int
    layers: int
    seed: int
    max_rel_err: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_err) and self.max_rel_err < GRADCHECK_TOLERANCE


def _rel_err(analytic: float, numeric: float) -> float:
    # absolute comparison below unit scale, relative above it
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


def gradcheck(cell_kind: str, d: int = 4, T: int = 8, vocab: int = 6,
              layers: int = 1, seed: int = 0,
              mask: GateMask | None = None) -> GradcheckReport:
    """Compare full-window BPTT gradients against central finite differences.

    Every parameter entry is perturbed by +/- 1e-5 and the loss re-run;
    the report carries the worst relative error over all entries (zero
    when both sides vanish).
    """
    if d > 8 or T > 16:
        raise ValueError("gradcheck is for small instances only (d <= 8, T <= 16)")
    rng = Rng(seed)
    cfg = ModelConfig(cell_kind=cell_kind, layers=layers, hidden=d, embed_dim=d,
                      vocab=vocab, gate_mask=mask or GateMask(), init_scale=1.0)
    model = Model.init(cfg, rng.child("model-init"))
    tokens = rng.child("tokens").integers(vocab, T + 1)

    _, grads = engine.sequence_grads(model, tokens)
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        raise GradcheckFailure(f"{cell_kind}: non-finite analytic gradient")

    worst = 0.0
    worst_param = ""
    for name, p in model.named_params():
        g = grads[name]
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + _FD_STEP
            lp, _, _ = engine.forward_sequence(model, tokens)
            flat[i] = orig - _FD_STEP
            lm, _, _ = engine.forward_sequence(model, tokens)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * _FD_STEP)
            err = _rel_err(float(gflat[i]), numeric)
            if err > worst:
                worst = err
                worst_param = f"{name}[{i}]"
    return GradcheckReport(cell_kind, d, T, vocab, layers, seed, worst, worst_param)


_verified_cells: set[str] = set()


def require_verified_gradients(cell_kind: str) -> None:
    """Run a small gradcheck once per process; raise on failure."""
    if cell_kind in _verified_cells:
        return
    rep = gradcheck(cell_kind, d=4, T=8, seed=0)
    if not rep.passed:
        raise GradcheckFailure(
            f"gradcheck({cell_kind}) failed: max_rel_err={rep.max_rel_err:.3e} "
            f"at {rep.worst_param}")
    _verified_cells.add(cell_kind)


# ---------------------------------------------------------------------------
# gate ablation sweep


def standard_masks() -> list[tuple[str, GateMask]]:
    """The 13 mask rows: four singles, six pairs, two triples, full cell."""
    return [
        ("open Sigmoid_1", GateMask(open1=True)),
        ("open Sigmoid_2", GateMask(open2=True)),
        ("open Sigmoid_3", GateMask(open3=True)),
        ("open Sigmoid_4", GateMask(open4=True)),
        ("open Sigmoid_4+Sigmoid_3", GateMask(open3=True, open4=True)),
        ("open Sigmoid_1+Sigmoid_2", GateMask(open1=True, open2=True)),
        ("open Sigmoid_1+Sigmoid_3", GateMask(open1=True, open3=True)),
        ("open Sigmoid_1+Sigmoid_4", GateMask(open1=True, open4=True)),
        ("open Sigmoid_2+Sigmoid_3", GateMask(open2=True, open3=True)),
        ("open Sigmoid_2+Sigmoid_4", GateMask(open2=True, open4=True)),
        ("open Sigmoid_4+Sigmoid_3+Sigmoid_2",
         GateMask(open2=True, open3=True, open4=True)),
        ("open Sigmoid_4+Sigmoid_3+Sigmoid_1",
         GateMask(open1=True, open3=True, open4=True)),
        ("all gates active", GateMask()),
    ]


@dataclass
class AblationPlan:
    """One training run per (mask, seed); only the mask varies across rows."""

    masks: list[tuple[str, GateMask]] = field(default_factory=standard_masks)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    hidden: int = 64
    layers: int = 2
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=32, bptt_len=64, epochs=10, optimizer="adam", lr=5e-3))

    def validate(self) -> None:
        if not self.masks or not self.seeds:
            raise ValueError("ablation plan needs at least one mask and one seed")


@dataclass
class AblationRow:
    label: str
    mean_ppl: float
    std_ppl: float
    per_seed: list[float]
    diverged: int


def _train_eval_ppl(corpus, mask: GateMask, seed: int, plan: AblationPlan) -> float:
    cfg = ModelConfig(cell_kind="ltm", layers=plan.layers, hidden=plan.hidden,
                      embed_dim=plan.hidden, vocab=corpus.vocab.size,
                      gate_mask=mask)
    model = Model.init(cfg, Rng(seed).child("model-init"))
    tc = replace(plan.train, seed=seed)
    try:
        engine.train(model, corpus, tc)
    except engine.NonFiniteLossError:
        return math.inf
    return engine.evaluate(model, corpus.test,
                           batch_size=tc.batch_size, bptt_len=tc.bptt_len).perplexity


def run_ablation(corpus, plan: AblationPlan | None = None,
                 jobs: int = 1, progress=None) -> list[AblationRow]:
    """Train one model per (mask, seed) and aggregate test perplexity.

    A diverged run is recorded as infinite perplexity in its row rather
    than aborting the sweep. Rows keep the order of plan.masks.
    """
    plan = plan or AblationPlan()
    plan.validate()
    require_verified_gradients("ltm")

    tasks = [(mi, si, mask, seed)
             for mi, (_, mask) in enumerate(plan.masks)
             for si, seed in enumerate(plan.seeds)]
    results: dict[tuple[int, int], float] = {}

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            futs = {ex.submit(_train_eval_ppl, corpus, mask, seed, plan): (mi, si)
                    for mi, si, mask, seed in tasks}
            for fut, key in futs.items():
                results[key] = fut.result()
                if progress:
                    progress(len(results), len(tasks))
    else:
        for mi, si, mask, seed in tasks:
            results[(mi, si)] = _train_eval_ppl(corpus, mask, seed, plan)
            if progress:
                progress(len(results), len(tasks))

    rows = []
    for mi, (label, _) in enumerate(plan.masks):
        ppls = [results[(mi, si)] for si in range(len(plan.seeds))]
        finite = [p for p in ppls if math.isfinite(p)]
        diverged = len(ppls) - len(finite)
        mean = float(np.mean(ppls)) if not diverged else math.inf
        std = float(np.std(ppls)) if not diverged else math.inf
        rows.append(AblationRow(label, mean, std, ppls, diverged))
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "mean_ppl", "std_ppl"])
        for r in rows:
            w.writerow([r.label, f"{r.mean_ppl:.6f}", f"{r.std_ppl:.6f}"])


def write_ablation_json(rows: list[AblationRow], path) -> None:
    payload = [{"label": r.label, "mean_ppl": r.mean_ppl, "std_ppl": r.std_ppl,
                "per_seed": r.per_seed, "diverged": r.diverged} for r in rows]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# long-horizon stability probe


@dataclass
class ProbeResult:
    cell_kind: str
    horizon: int
    grad_x1_norm: float
    grad_param_norm: float
    state_min: float
    state_max: float
    nan_seen: bool


def stability_probe(cell_kind: str, horizons: list[int], seed: int = 0,
                    d: int = 64, vocab: int = 50, gain: float | None = None,
                    check_bounds: bool | None = None) -> list[ProbeResult]:
    """Roll a randomly initialized single-layer model over random tokens.

    The loss is taken at the final position only, so grad_x1_norm is the
    gradient of the last-step loss with respect to the first embedded
    input: the classic end-to-start sensitivity through T steps. With
    ``gain`` the recurrent weights are drawn uniform with per-entry
    variance gain^2/fan_in (values above 1 put a tanh rnn in its unstable
    regime). NaN/Inf anywhere is recorded, not raised.

    For the additive-memory cell the squashed state must stay inside
    (0, 1) and the pre-squash state inside [0, 2); violations raise
    :class:`ProbeBoundViolation` unless check_bounds is False.
    """
    require_verified_gradients(cell_kind)
    if check_bounds is None:
        check_bounds = cell_kind == "ltm"
    rng = Rng(seed)
    results = []
    for T in horizons:
        cfg = ModelConfig(cell_kind=cell_kind, layers=1, hidden=d, embed_dim=d,
                          vocab=vocab)
        model = Model.init(cfg, rng.child(f"model-{T}"))
        if gain is not None:
            # per-entry variance gain^2/d puts the recurrent map at
            # effective weight scale `gain`; above 1 a tanh recurrence is
            # chaotic and end-to-start gradients grow exponentially
            bound = gain * math.sqrt(3.0 / d)
            for fname, arr in list(model.layers[0].__dict__.items()):
                if isinstance(arr, np.ndarray) and arr.ndim == 2:
                    arr[...] = rng.child(f"gain-{T}-{fname}").uniform(
                        -bound, bound, arr.shape)
        tokens = rng.child(f"tokens-{T}").integers(vocab, T + 1)

        weights = np.zeros((T, 1))
        weights[-1, 0] = 1.0
        states = model.zero_states(1)
        with np.errstate(over="ignore", invalid="ignore"):
            run = engine.run_window(model, tokens[:-1, None], tokens[1:, None],
                                    states, loss_weights=weights,
                                    want_input_grads=True, keep_traces=True)
        grad_x1 = float(np.linalg.norm(run.grad_x[0, 0]))
        pnorm = engine.global_grad_norm(run.grads)

        trace = run.traces[0]
        nan_seen = not math.isfinite(run.loss_sum)
        if cell_kind == "ltm":
            c_seq = trace.arrays[4]
            cp_seq = trace.arrays[3]
            state_min = float(np.min(c_seq))
            state_max = float(np.max(c_seq))
            if check_bounds:
                if not (np.all(c_seq > 0.0) and np.all(c_seq < 1.0)):
                    raise ProbeBoundViolation(
                        f"squashed state left (0,1) at T={T}: "
                        f"[{np.min(c_seq)}, {np.max(c_seq)}]")
                if not (np.all(cp_seq >= 0.0) and np.all(cp_seq < 2.0)):
                    raise ProbeBoundViolation(
                        f"pre-squash state left [0,2) at T={T}: "
                        f"[{np.min(cp_seq)}, {np.max(cp_seq)}]")
        else:
            h_seq = engine.trace_h(trace)
            state_min = float(np.min(h_seq))
            state_max = float(np.max(h_seq))
        for arrs in (trace.arrays, (run.grad_x,), tuple(run.grads.values())):
            for a in arrs:
                if not np.all(np.isfinite(a)):
                    nan_seen = True
        if not (math.isfinite(grad_x1) and math.isfinite(pnorm)):
            nan_seen = True
        if check_bounds and nan_seen:
            raise ProbeBoundViolation(f"non-finite value in probe at T={T}")
        results.append(ProbeResult(cell_kind, T, grad_x1, pnorm,
                                   state_min, state_max, nan_seen))
    return results


def write_probe_csv(results: list[ProbeResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "grad_x1_norm", "grad_param_norm", "c_min", "c_max", "nan"])
        for r in results:
            w.writerow([r.horizon, repr(r.grad_x1_norm), repr(r.grad_param_norm),
                        repr(r.state_min), repr(r.state_max), int(r.nan_seen)])


def write_probe_json(results: list[ProbeResult], path) -> None:
    payload = [{"cell_kind": r.cell_kind, "T": r.horizon,
                "grad_x1_norm": r.grad_x1_norm,
                "grad_param_norm": r.grad_param_norm,
                "c_min": r.state_min, "c_max": r.state_max,
                "nan": r.nan_seen} for r in results]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# sequence-length timing


STANDARD_LENGTHS = (50, 100, 200, 250, 300, 350, 400, 450, 500, 600, 1000)


@dataclass
class TimingRow:
    seq_len: int
    train_seconds: float
    eval_seconds: float


def timing_sweep(corpus, seq_lens=STANDARD_LENGTHS, *, cell_kind: str = "ltm",
                 hidden: int = 64, layers: int = 2, batch_size: int = 32,
                 seed: int = 0, repeats: int = 1) -> list[TimingRow]:
    """Wall-clock of one training epoch and one test evaluation per window length."""
    seq_lens = list(seq_lens)
    if sorted(seq_lens) != seq_lens:
        raise ValueError("sequence lengths must be sorted ascending")
    rows = []
    for T in seq_lens:
        cfg = ModelConfig(cell_kind=cell_kind, layers=layers, hidden=hidden,
                          embed_dim=hidden, vocab=corpus.vocab.size)
        tc = TrainConfig(batch_size=batch_size, bptt_len=T, epochs=1, seed=seed)
        train_times, eval_times = [], []
        for _ in range(max(1, repeats)):
            model = Model.init(cfg, Rng(seed).child("model-init"))
            t0 = time.perf_counter()
            engine.train(model, corpus, tc)
            train_times.append(time.perf_counter() - t0)
            t1 = time.perf_counter()
            engine.evaluate(model, corpus.test, batch_size=batch_size, bptt_len=T)
            eval_times.append(time.perf_counter() - t1)
        rows.append(TimingRow(T, float(np.median(train_times)),
                              float(np.median(eval_times))))
    return rows


def write_timing_csv(rows: list[TimingRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_len", "train_seconds", "eval_seconds"])
        for r in rows:
            w.writerow([r.seq_len, f"{r.train_seconds:.6f}", f"{r.eval_seconds:.6f}"])


def write_timing_json(rows: list[TimingRow], path) -> None:
    payload = [{"seq_len": r.seq_len, "train_seconds": r.train_seconds,
                "eval_seconds": r.eval_seconds} for r in rows]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
