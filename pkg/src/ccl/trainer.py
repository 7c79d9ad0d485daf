"""Joint online training of M experts, their discriminators and one student.

A step follows the fixed order: restyle every image into every target style,
forward all segmentors, update discriminators (Adam), compute generator-side
losses against the updated discriminators, add the weight regulariser, then
apply SGD to all segmentors (experts 1..M, then the student).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import losses
from .core import (ConfigError, DomainSplit, MultiDomainDataset, NumericalError, StepBatch,
                   batch_iterator)
from .losses import LossWeights
from .metrics import ConfusionMatrix, accumulate, metrics_report
from .nets import (DiscriminatorConfig, SegmentorConfig, discriminator_forward, init_params,
                   predict_probs)
from .styletransfer import StyleStats, compute_style, translate

log = logging.getLogger(__name__)

MODES = ("ccl", "source_only", "data_combination", "individual")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    M: int = 2
    iterations: int = 2000
    batch_size: int = 4
    seg_lr: float = 2.5e-4
    seg_momentum: float = 0.9
    seg_weight_decay: float = 5e-4
    disc_lr: float = 1e-4
    disc_betas: tuple[float, float] = (0.9, 0.99)
    poly_power: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    wr_stop_student: bool = False
    mode: str = "ccl"
    base_width: int = 16
    depth: int = 3
    disc_width: int = 16
    eval_every: int = 200
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seg_lr <= 0 or self.disc_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_betas"] = list(self.disc_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "weights" in d:
            try:
                d["weights"] = LossWeights(**d["weights"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad weights: {e}") from e
        if "disc_betas" in d:
            d["disc_betas"] = tuple(d["disc_betas"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def seg_config(self, num_classes: int) -> SegmentorConfig:
        return SegmentorConfig(num_classes, self.base_width, self.depth)

    def disc_config(self, num_classes: int) -> DiscriminatorConfig:
        return DiscriminatorConfig(num_classes, self.disc_width)


def poly_lr(step: int, total: int, base_lr: float, power: float) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base_lr * (1 - step / total) ** power


# ------------------------------------------------------------------- state

@dataclass
class Model:
    config: SegmentorConfig | DiscriminatorConfig
    params: torch.Tensor
    opt: torch.optim.Optimizer

    @property
    def is_segmentor(self) -> bool:
        return isinstance(self.config, SegmentorConfig)


@dataclass
class TrainState:
    """All models keyed by role: ``expert_m``, ``disc_m``, ``student``, ``disc_student``."""

    models: dict[str, Model]
    step: int = 0

    @property
    def experts(self) -> list[Model]:
        return [self.models[k] for k in _sorted_roles(self.models, "expert_")]

    @property
    def expert_discs(self) -> list[Model]:
        return [self.models[k] for k in _sorted_roles(self.models, "disc_") if k != "disc_student"]

    @property
    def student(self) -> Model | None:
        return self.models.get("student")

    @property
    def student_disc(self) -> Model | None:
        return self.models.get("disc_student")


def _sorted_roles(models: dict, prefix: str) -> list[str]:
    keys = [k for k in models if k.startswith(prefix) and k[len(prefix):].isdigit()]
    return sorted(keys, key=lambda k: int(k[len(prefix):]))


def roles_for(config: TrainConfig) -> list[str]:
    M = config.M
    if config.mode == "ccl":
        return ([f"expert_{m}" for m in range(1, M + 1)] + [f"disc_{m}" for m in range(1, M + 1)]
                + ["student", "disc_student"])
    if config.mode == "individual":
        return [f"expert_{m}" for m in range(1, M + 1)] + [f"disc_{m}" for m in range(1, M + 1)]
    if config.mode == "data_combination":
        return ["student", "disc_student"]
    return ["student"]


def make_model(role: str, config: TrainConfig, num_classes: int) -> Model:
    """Fresh model for ``role``.

    All segmentors share one initialisation (seeded by ``config.seed``), as do
    all discriminators, so expert-student weight distances start at zero.
    """
    dtype = config.torch_dtype
    if role.startswith("disc_"):
        mcfg = config.disc_config(num_classes)
        params = init_params(mcfg, config.seed + 1, dtype).requires_grad_()
        opt = torch.optim.Adam([params], lr=config.disc_lr, betas=config.disc_betas, foreach=False)
    else:
        mcfg = config.seg_config(num_classes)
        params = init_params(mcfg, config.seed, dtype).requires_grad_()
        opt = torch.optim.SGD([params], lr=config.seg_lr, momentum=config.seg_momentum,
                              weight_decay=config.seg_weight_decay, foreach=False)
    return Model(mcfg, params, opt)


def init_state(config: TrainConfig, num_classes: int) -> TrainState:
    return TrainState({r: make_model(r, config, num_classes) for r in roles_for(config)})


# -------------------------------------------------------------- restyling

class Restyler:
    """Reinhard translation between domains using split-level statistics.

    Results are memoised per (domain, image index, target style); translation
    is deterministic, so this only avoids recomputation.
    """

    def __init__(self, stats: list[StyleStats]):
        self.stats = stats
        self._cache: dict[tuple[int, int, int], np.ndarray] = {}

    @classmethod
    def from_dataset(cls, dataset: MultiDomainDataset) -> Restyler:
        return cls([compute_style(dataset.source.images)]
                   + [compute_style(t.images) for t in dataset.targets])

    def __call__(self, images: np.ndarray, indices: Iterable[int], domain: int, style: int) -> np.ndarray:
        if domain == style:
            return images
        out = []
        for img, i in zip(images, indices):
            key = (domain, int(i), style)
            if key not in self._cache:
                self._cache[key] = translate(img, self.stats[domain], self.stats[style]).astype(np.float32)
            out.append(self._cache[key])
        return np.stack(out)


def to_tensor(images: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype)


def styled_inputs(batch: StepBatch, restyle: Restyler, m: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Source batch and every target batch rendered in target ``m``'s style."""
    src = restyle(batch.source.images, batch.source.indices, 0, m)
    tgts = [restyle(t.images, t.indices, t.domain_id, m) for t in batch.targets]
    return src, tgts


# ------------------------------------------------------------ step pieces

def segment(model: Model, images: list[np.ndarray]) -> list[torch.Tensor]:
    """Probability maps of one segmentor for several same-size batches (one forward)."""
    dtype = model.params.dtype
    x = torch.cat([to_tensor(im, dtype) for im in images])
    probs = predict_probs(model.params, x, model.config)
    return list(torch.split(probs, [len(im) for im in images]))


def disc_update(disc: Model, source_probs: list[torch.Tensor], target_probs: list[torch.Tensor]) -> torch.Tensor:
    """One Adam step of a discriminator on detached maps; returns the pre-update loss."""
    disc.opt.zero_grad(set_to_none=True)
    d_src = [discriminator_forward(disc.params, p.detach(), disc.config) for p in source_probs]
    d_tgt = [discriminator_forward(disc.params, p.detach(), disc.config) for p in target_probs]
    loss = losses.adv_loss_D(d_src, d_tgt)
    loss.backward()
    disc.opt.step()
    return loss.detach()


def adv_generator(disc: Model, target_probs: list[torch.Tensor]) -> torch.Tensor:
    """Generator-side adversarial loss; discriminator weights are frozen here."""
    frozen = disc.params.detach()
    return losses.adv_loss_G([discriminator_forward(frozen, p, disc.config) for p in target_probs])


def labels_tensor(labels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(labels.astype(np.int64))


LossReport = dict[str, float]


def _record(report: LossReport, name: str, value, step: int) -> None:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not np.isfinite(v):
        raise NumericalError(f"non-finite loss term {name!r} ({v}) at step {step}")
    report[name] = v


def _sgd_phase(state: TrainState, config: TrainConfig) -> None:
    lr = poly_lr(state.step, config.iterations, config.seg_lr, config.poly_power)
    order = [k for k in _sorted_roles(state.models, "expert_")] + (["student"] if state.student else [])
    for role in order:
        model = state.models[role]
        for group in model.opt.param_groups:
            group["lr"] = lr
        if model.params.grad is not None:
            model.opt.step()


def _zero_segmentor_grads(state: TrainState) -> None:
    for model in state.models.values():
        if model.is_segmentor:
            model.params.grad = None


@dataclass
class Predictions:
    """Forward outputs of one CCL step.

    ``experts[m-1]`` is ``(P_s^{t_m}, [P_{t_n}^{t_m} for n = 1..M])`` and
    ``student`` is ``(Q_s, [Q_{t_n}])``; ``native[n-1]`` is expert n on its own
    domain, the teacher for both consistency and distillation.
    """

    experts: list[tuple[torch.Tensor, list[torch.Tensor]]]
    student: tuple[torch.Tensor, list[torch.Tensor]] | None
    labels: torch.Tensor

    @property
    def native(self) -> list[torch.Tensor]:
        return [self.experts[n][1][n] for n in range(len(self.experts))]


def forward_all(state: TrainState, batch: StepBatch, restyle: Restyler) -> Predictions:
    """Restyle every batch into every target style and run all segmentors."""
    experts = []
    for m, expert in enumerate(state.experts, start=1):
        src, tgts = styled_inputs(batch, restyle, m)
        out = segment(expert, [src, *tgts])
        experts.append((out[0], out[1:]))
    student = None
    if state.student is not None:
        q = segment(state.student, [batch.source.images] + [t.images for t in batch.targets])
        student = (q[0], q[1:])
    return Predictions(experts, student, labels_tensor(batch.source.labels))


def generator_terms(state: TrainState, preds: Predictions, config: TrainConfig,
                    teachers: list[torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Every segmentor-side loss term of a CCL step, as differentiable tensors.

    ``teachers`` overrides the native expert predictions used as (detached)
    targets for consistency and distillation.
    """
    w = config.weights
    M = len(preds.experts)
    native = preds.native if teachers is None else teachers
    zero = torch.zeros((), dtype=preds.student[0].dtype)
    terms: dict[str, torch.Tensor] = {}
    for m in range(1, M + 1):
        p_src, p_tgt = preds.experts[m - 1]
        seg = losses.seg_loss(p_src, preds.labels)
        adv = adv_generator(state.expert_discs[m - 1], p_tgt) if w.lambda_adv else zero
        cl = losses.consistency_loss(m, native, p_tgt) if w.lambda_cl and M > 1 else zero
        terms[f"expert_{m}/seg"], terms[f"expert_{m}/adv_g"], terms[f"expert_{m}/cl"] = seg, adv, cl
        terms[f"expert_{m}/total"] = losses.expert_objective(seg, adv, cl, w)
    q_src, q_tgt = preds.student
    seg = losses.seg_loss(q_src, preds.labels)
    adv = adv_generator(state.student_disc, q_tgt) if w.lambda_adv else zero
    okd = losses.okd_loss(native, q_tgt) if w.lambda_okd else zero
    terms["student/seg"], terms["student/adv_g"], terms["student/okd"] = seg, adv, okd
    terms["student/total"] = losses.student_objective(seg, adv, okd, w)
    terms["wr"] = losses.weight_reg([e.params for e in state.experts], state.student.params,
                                    config.wr_stop_student)
    # Averaged expert objective over the M experts; each expert's optimiser sees
    # its own total (the 1/M factor is a shared constant scale).
    terms["expert/total"] = torch.stack([terms[f"expert_{m}/total"] for m in range(1, M + 1)]).mean()
    terms["total"] = losses.total_objective(terms["expert/total"], terms["student/total"], terms["wr"], w)
    return terms


def composite_objectives(state: TrainState, batch: StepBatch, config: TrainConfig, restyle: Restyler,
                         teachers: list[torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Forward pass plus :func:`generator_terms`, without touching any optimiser."""
    return generator_terms(state, forward_all(state, batch, restyle), config, teachers)


def ccl_step(state: TrainState, batch: StepBatch, config: TrainConfig, restyle: Restyler) -> LossReport:
    """One joint optimisation step of all experts, discriminators and the student."""
    w = config.weights
    M = len(state.experts)
    if len(batch.targets) != M:
        raise ConfigError(f"{M} experts but {len(batch.targets)} target batches")
    k = state.step
    report: LossReport = {}
    _zero_segmentor_grads(state)

    # (a, b) restyle and forward every segmentor
    preds = forward_all(state, batch, restyle)

    # (c) expert discriminators, then the student's, on detached maps
    for m, disc in enumerate(state.expert_discs, start=1):
        p_src, p_tgt = preds.experts[m - 1]
        _record(report, f"disc_{m}/loss", disc_update(disc, [p_src], p_tgt), k)
    q_src, q_tgt = preds.student
    _record(report, "disc_student/loss", disc_update(state.student_disc, [q_src], q_tgt), k)

    # (d, e) generator-side objectives against the updated discriminators
    terms = generator_terms(state, preds, config)
    for name, value in terms.items():
        _record(report, name, value, k)
    for m in range(1, M + 1):
        terms[f"expert_{m}/total"].backward()
    terms["student/total"].backward()

    # (f) weight regulariser
    if w.lambda_wr:
        (w.lambda_wr * terms["wr"]).backward()

    # (g) segmentor updates
    _sgd_phase(state, config)
    state.step += 1
    return report


def expert_step(state: TrainState, batch: StepBatch, config: TrainConfig, restyle: Restyler,
                m: int, target_ids: list[int] | None = None) -> LossReport:
    """Single-target adversarial step of expert ``m`` alone (no consistency, no student).

    ``target_ids`` selects which target batches (1-based, rendered in style m)
    form the target side; ``None`` means all of them.
    """
    w = config.weights
    k = state.step
    report: LossReport = {}
    expert, disc = state.models[f"expert_{m}"], state.models[f"disc_{m}"]
    src, tgts = styled_inputs(batch, restyle, m)
    if target_ids is not None:
        tgts = [tgts[n - 1] for n in target_ids]
    expert.params.grad = None
    out = segment(expert, [src, *tgts])
    p_src, p_tgt = out[0], out[1:]
    _record(report, f"disc_{m}/loss", disc_update(disc, [p_src], p_tgt), k)
    seg = losses.seg_loss(p_src, labels_tensor(batch.source.labels))
    adv = adv_generator(disc, p_tgt) if w.lambda_adv else torch.zeros(())
    total = losses.expert_objective(seg, adv, 0.0, w)
    for name, v in (("seg", seg), ("adv_g", adv), ("cl", 0.0), ("total", total)):
        _record(report, f"expert_{m}/{name}", v, k)
    total.backward()
    lr = poly_lr(k, config.iterations, config.seg_lr, config.poly_power)
    for group in expert.opt.param_groups:
        group["lr"] = lr
    expert.opt.step()
    return report


def student_step(state: TrainState, batch: StepBatch, config: TrainConfig, adversarial: bool = True) -> LossReport:
    """Student trained on raw source (+ adversarial alignment to raw targets), no teachers."""
    w = config.weights
    k = state.step
    report: LossReport = {}
    student = state.student
    student.params.grad = None
    q = segment(student, [batch.source.images] + ([t.images for t in batch.targets] if adversarial else []))
    seg = losses.seg_loss(q[0], labels_tensor(batch.source.labels))
    adv = torch.zeros(())
    if adversarial:
        _record(report, "disc_student/loss", disc_update(state.student_disc, [q[0]], q[1:]), k)
        if w.lambda_adv:
            adv = adv_generator(state.student_disc, q[1:])
    total = losses.student_objective(seg, adv, 0.0, w)
    for name, v in (("seg", seg), ("adv_g", adv), ("okd", 0.0), ("total", total)):
        _record(report, f"student/{name}", v, k)
    total.backward()
    lr = poly_lr(k, config.iterations, config.seg_lr, config.poly_power)
    for group in student.opt.param_groups:
        group["lr"] = lr
    student.opt.step()
    return report


def train_step(state: TrainState, batch: StepBatch, config: TrainConfig, restyle: Restyler) -> LossReport:
    """Dispatch one step according to ``config.mode``."""
    if config.mode == "ccl":
        return ccl_step(state, batch, config, restyle)
    report: LossReport = {}
    if config.mode == "individual":
        for m in range(1, len(state.experts) + 1):
            report.update(expert_step(state, batch, config, restyle, m, target_ids=[m]))
    elif config.mode == "data_combination":
        report.update(student_step(state, batch, config, adversarial=True))
    else:
        report.update(student_step(state, batch, config, adversarial=False))
    state.step += 1
    return report


# ----------------------------------------------------------------- evaluation

@torch.no_grad()
def evaluate_split(model: Model, split: DomainSplit, batch_size: int = 25) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(model.config.num_classes)
    for lo in range(0, len(split), batch_size):
        imgs = split.images[lo:lo + batch_size]
        probs = segment(model, [imgs])[0]
        pred = probs.argmax(1).numpy()
        cm = accumulate(cm, pred, split.labels[lo:lo + batch_size])
    return cm


def evaluate(state: TrainState, dataset: MultiDomainDataset, mode: str) -> list[dict]:
    """mIoU reports for every eval split.

    The single deployable model (the student) is scored on every target; in
    ``individual`` mode expert m is scored on target m. In ``ccl`` mode the
    experts are additionally scored on their own domains.
    """
    reports = []
    for m, split in enumerate(dataset.eval_splits, start=1):
        if mode == "individual":
            role = f"expert_{m}"
        else:
            role = "student"
        reports.append(metrics_report(evaluate_split(state.models[role], split), m, state.step, role=role))
        if mode == "ccl":
            role = f"expert_{m}"
            reports.append(metrics_report(evaluate_split(state.models[role], split), m, state.step, role=role))
    return reports


# ------------------------------------------------------------------ training

def _check_dataset(dataset: MultiDomainDataset, config: TrainConfig) -> MultiDomainDataset:
    if config.mode in ("ccl", "individual") and dataset.M != config.M:
        raise ConfigError(f"config.M={config.M} but dataset has {dataset.M} targets")
    return dataset


def train(dataset: MultiDomainDataset, config: TrainConfig, state: TrainState | None = None,
          log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
          checkpoint_every: int = 0, on_step: Callable[[int, LossReport], None] | None = None,
          until: int | None = None) -> tuple[TrainState, dict]:
    """Run (or resume) training to ``config.iterations`` steps.

    ``until`` stops early (the schedule still spans ``config.iterations``),
    which is how an interrupted run is produced.

    Returns the final state and a history dict with the per-step loss reports
    and the periodic evaluation reports (the last entry is the final model).
    """
    _check_dataset(dataset, config)
    torch.manual_seed(config.seed)
    if state is None:
        state = init_state(config, dataset.num_classes)
    stream_ds = dataset.combined_targets() if config.mode == "data_combination" else dataset
    restyle = Restyler.from_dataset(dataset) if config.mode in ("ccl", "individual") else None
    stream = batch_iterator(stream_ds, config.batch_size, config.seed, start_step=state.step)
    history = {"losses": [], "evals": []}
    stop = config.iterations if until is None else min(until, config.iterations)
    log_file = open(log_path, "a") if log_path else None
    try:
        while state.step < stop:
            batch = next(stream)
            step = state.step
            report = train_step(state, batch, config, restyle)
            history["losses"].append({"step": step, **report})
            if log_file:
                for name, value in report.items():
                    log_file.write(json.dumps({"step": step, "term_name": name, "value": value}) + "\n")
            if on_step:
                on_step(step, report)
            done = state.step == config.iterations
            if config.eval_every and (state.step % config.eval_every == 0 or done):
                evals = evaluate(state, dataset, config.mode)
                history["evals"].extend(evals)
                log.info("step %d: %s", state.step,
                         ", ".join(f"{r['role']}@{r['domain_id']}={r['miou']:.3f}" for r in evals))
            if checkpoint_path and checkpoint_every and (state.step % checkpoint_every == 0 or done):
                save_checkpoint(state, config, checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    if not history["evals"] or history["evals"][-1]["step"] != state.step:
        history["evals"].extend(evaluate(state, dataset, config.mode))
    return state, history


def final_metrics(history: dict) -> list[dict]:
    last = max(r["step"] for r in history["evals"])
    return [r for r in history["evals"] if r["step"] == last]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, config: TrainConfig, path: str | Path) -> Path:
    """Single ``.npz`` archive: config echo, step, every parameter vector and optimiser state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"config": np.array(json.dumps(config.to_dict())), "step": np.array(state.step)}
    for role, model in state.models.items():
        arrays[role] = model.params.detach().numpy()
        for key, value in model.opt.state.get(model.params, {}).items():
            if value is not None:
                arrays[f"opt/{role}/{key}"] = np.asarray(torch.as_tensor(value).detach().numpy())
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, num_classes: int | None = None) -> tuple[TrainState, TrainConfig]:
    with np.load(path) as z:
        config = TrainConfig.from_dict(json.loads(str(z["config"])))
        roles = [k for k in z.files if not k.startswith("opt/") and k not in ("config", "step")]
        if num_classes is None:
            head = z["student"] if "student" in z.files else z["expert_1"]
            num_classes = _infer_classes(config, head.size)
        state = init_state(config, num_classes)
        if set(roles) != set(state.models):
            raise ConfigError(f"checkpoint roles {sorted(roles)} do not match mode {config.mode}")
        with torch.no_grad():
            for role, model in state.models.items():
                model.params.copy_(torch.from_numpy(z[role]))
                opt_state = {}
                prefix = f"opt/{role}/"
                for key in z.files:
                    if key.startswith(prefix):
                        opt_state[key[len(prefix):]] = torch.from_numpy(np.array(z[key]))
                if opt_state:
                    model.opt.state[model.params] = opt_state
        state.step = int(z["step"])
    return state, config


def _infer_classes(config: TrainConfig, n: int) -> int:
    for c in range(2, 1000):
        if config.seg_config(c).num_params == n:
            return c
    raise ConfigError("cannot infer num_classes from checkpoint")


def with_weights(config: TrainConfig, **lambdas) -> TrainConfig:
    return replace(config, weights=replace(config.weights, **lambdas))
