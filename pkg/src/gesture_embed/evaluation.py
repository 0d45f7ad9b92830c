"""Downstream evaluation: form-similarity correlation, reference resolution and its protocols.

Resolvers are small MLPs (two hidden layers, 300 and 150 units) trained with
Adam. Protocols that need many of them (the six leave-one-round-out folds, the
per-round dialogue-history models) train them in lockstep as one stacked batch
of independent networks; each network sees exactly the minibatch sequence it
would see if trained alone.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy import stats

from .skeleton import FormSimilarityPair, GestureSample, SkeletonSequence, add_gaussian_jitter, derive_seed

NUM_ROUNDS = 6
DEFAULT_SIGMAS = (0.0, 0.2, 1.0, 15.0)


class UndefinedCorrelationError(ValueError):
    """Correlation or t statistic is undefined (e.g. constant input)."""


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------------------
# statistics


def spearman(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Spearman rho (Pearson on average-tie ranks) with a t-approximation p-value (n-2 dof)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be equal-length 1-d sequences")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 observations")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise UndefinedCorrelationError("spearman rho undefined for constant input")
    rho = float(np.clip(rx @ ry / denom, -1.0, 1.0))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2 * stats.t.sf(abs(t), n - 2))


def ttest_independent(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Welch's unequal-variance two-sample t-test, two-sided."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 observations")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0.0:
        raise UndefinedCorrelationError("t statistic undefined: both samples have zero variance")
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1)) if va or vb else float("inf")
    return float(t), float(2 * stats.t.sf(abs(t), dof))


def binomial_ci(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(successes, trials).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise FloatingPointError("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def form_similarity_correlation(pairs: Sequence[FormSimilarityPair],
                                embed: Mapping[str, np.ndarray] | Callable[[str], np.ndarray]) -> tuple[float, float]:
    """Spearman rho between shared form-feature counts and embedding cosine similarity."""
    if len(pairs) < 3:
        raise ValueError("need at least 3 form pairs")
    lookup = embed.__getitem__ if isinstance(embed, Mapping) else embed
    counts, sims = [], []
    for p in pairs:
        try:
            a, b = lookup(p.id_a), lookup(p.id_b)
        except KeyError as exc:
            raise KeyError(f"no embedding for sample {exc.args[0]}") from None
        counts.append(p.shared_count)
        sims.append(cosine(np.asarray(a, np.float64), np.asarray(b, np.float64)))
    return spearman(counts, sims)


def fingerprint(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# resolver


@dataclass(frozen=True)
class ResolverConfig:
    hidden: tuple[int, ...] = (300, 150)
    batch_size: int = 32
    learning_rate: float = 1e-4
    epochs: int = 200
    num_classes: int | None = None
    standardize: bool = True

    def __post_init__(self):
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResolverModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    scale: np.ndarray
    num_classes: int

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        y = np.asarray(y)
        return float((self.predict(x) == y).mean()) if len(y) else float("nan")


def _standardizer(x: np.ndarray, enabled: bool) -> tuple[np.ndarray, np.ndarray]:
    if not enabled:
        return np.zeros(x.shape[1]), np.ones(x.shape[1])
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    return mean, np.where(scale > 1e-12, scale, 1.0)


def train_resolvers(tasks: Sequence[tuple[np.ndarray, np.ndarray, int]], config: ResolverConfig,
                    num_classes: int) -> list[ResolverModel]:
    """Train one MLP per ``(features, labels, seed)`` task in a single stacked loop.

    All tasks must share the feature width. Each network has its own
    initialization, minibatch order and Adam state; networks with fewer
    batches in an epoch simply skip the trailing updates.
    """
    if not tasks:
        return []
    d = tasks[0][0].shape[1]
    for x, y, _ in tasks:
        if x.shape[1] != d:
            raise ValueError("all resolver tasks must share the feature width")
        if len(y) and (y.min() < 0 or y.max() >= num_classes):
            raise ValueError(f"label outside vocabulary of size {num_classes}")
    m = len(tasks)
    dtype = torch.float32
    sizes = [d, *config.hidden, num_classes]

    scalers = [_standardizer(np.asarray(x, np.float64), config.standardize) if len(x) else
               (np.zeros(d), np.ones(d)) for x, _, _ in tasks]
    n = [len(y) for _, y, _ in tasks]
    n_max = max(max(n), 1)
    x_pad = torch.zeros(m, n_max, d, dtype=dtype)
    y_pad = torch.zeros(m, n_max, dtype=torch.int64)
    for i, ((x, y, _), (mu, sd)) in enumerate(zip(tasks, scalers)):
        x_pad[i, :n[i]] = torch.as_tensor((np.asarray(x, np.float64) - mu) / sd, dtype=dtype)
        y_pad[i, :n[i]] = torch.as_tensor(np.asarray(y, np.int64))

    params: list[torch.Tensor] = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = torch.empty(m, fan_in, fan_out, dtype=dtype)
        b = torch.empty(m, 1, fan_out, dtype=dtype)
        bound = 1.0 / math.sqrt(fan_in)
        for i, (_, _, seed) in enumerate(tasks):
            g = torch.Generator().manual_seed(derive_seed(seed, "resolver-init", fan_in, fan_out))
            w[i].uniform_(-bound, bound, generator=g)
            b[i].uniform_(-bound, bound, generator=g)
        params += [w.requires_grad_(), b.requires_grad_()]
    exp_avg = [torch.zeros_like(p) for p in params]
    exp_sq = [torch.zeros_like(p) for p in params]
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, config.learning_rate
    bs = config.batch_size
    rngs = [np.random.default_rng(derive_seed(seed, "resolver-order")) for _, _, seed in tasks]
    n_batches = np.array([math.ceil(k / bs) for k in n])
    total_steps = int(n_batches.max())
    rows = torch.arange(m)[:, None]
    step_count = np.zeros(m)

    for _ in range(config.epochs):
        # (m, total_steps * bs) index table; padding slots carry zero loss weight
        order = np.zeros((m, total_steps * bs), dtype=np.int64)
        valid = np.zeros((m, total_steps * bs), dtype=bool)
        for i, (r, k) in enumerate(zip(rngs, n)):
            order[i, :k] = r.permutation(k)
            valid[i, :k] = True
        order_t = torch.as_tensor(order).view(m, total_steps, bs)
        valid_t = torch.as_tensor(valid).view(m, total_steps, bs)
        counts = valid_t.sum(-1).to(dtype)
        weight_t = valid_t.to(dtype) / counts.clamp_min(1)[..., None]
        for step in range(total_steps):
            active_np = step < n_batches
            step_count += active_np
            idx = order_t[:, step]
            h = x_pad[rows, idx]
            for li in range(0, len(params), 2):
                h = torch.baddbmm(params[li + 1], h, params[li])
                if li < len(params) - 2:
                    h = torch.relu(h)
            nll = -torch.log_softmax(h, dim=-1).gather(-1, y_pad[rows, idx][..., None])[..., 0]
            loss = (nll * weight_t[:, step]).sum()
            grads = torch.autograd.grad(loss, params)
            with torch.no_grad():
                act = torch.as_tensor(active_np, dtype=dtype)
                bc1 = torch.as_tensor(1 - beta1 ** step_count, dtype=dtype).clamp_min(1e-30)
                bc2 = torch.as_tensor(1 - beta2 ** step_count, dtype=dtype).clamp_min(1e-30)
                for p, g, ea, es in zip(params, grads, exp_avg, exp_sq):
                    shape = (m,) + (1,) * (p.dim() - 1)
                    a = act.view(shape)
                    ea.lerp_(g, a * (1 - beta1))
                    es.lerp_(g * g, a * (1 - beta2))
                    update = (ea / bc1.view(shape)) / ((es / bc2.view(shape)).sqrt() + eps)
                    p.sub_(a * lr * update)

    models = []
    for i in range(m):
        ws = [params[li][i].detach().double().numpy() for li in range(0, len(params), 2)]
        bs_ = [params[li + 1][i, 0].detach().double().numpy() for li in range(0, len(params), 2)]
        models.append(ResolverModel(ws, bs_, scalers[i][0], scalers[i][1], num_classes))
    return models


def train_resolver(train_embeddings: np.ndarray, labels: np.ndarray, config: ResolverConfig = ResolverConfig(),
                   seed: int = 0, num_classes: int | None = None) -> ResolverModel:
    """Train a single referent classifier."""
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes or config.num_classes or int(labels.max()) + 1
    return train_resolvers([(np.asarray(train_embeddings), labels, seed)], config, k)[0]


# ---------------------------------------------------------------------------
# reports


@dataclass
class FoldResult:
    round: int
    accuracy: float
    n_train: int
    n_test: int
    majority_rate: float
    test_ids: list[str] = field(default_factory=list, repr=False)
    train_ids: list[str] = field(default_factory=list, repr=False)


@dataclass
class ExperimentReport:
    name: str
    folds: list[FoldResult]
    num_classes: int
    seed: int
    config: dict
    stats: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def sd(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.folds) > 1 else 0.0

    @property
    def chance(self) -> float:
        return 1.0 / self.num_classes

    @property
    def correct(self) -> int:
        return int(round(sum(f.accuracy * f.n_test for f in self.folds)))

    @property
    def n_test(self) -> int:
        return sum(f.n_test for f in self.folds)

    def to_dict(self, include_ids: bool = False) -> dict:
        folds = []
        for f in self.folds:
            d = {"round": f.round, "accuracy": f.accuracy, "n_train": f.n_train,
                 "n_test": f.n_test, "majority_rate": f.majority_rate}
            if include_ids:
                d["test_ids"], d["train_ids"] = f.test_ids, f.train_ids
            folds.append(d)
        return {
            "name": self.name, "folds": folds, "mean": self.mean, "sd": self.sd,
            "num_classes": self.num_classes, "chance": self.chance, "seed": self.seed,
            "config": self.config, "config_fingerprint": fingerprint({**self.config, "seed": self.seed}),
            "stats": self.stats,
        }


def _labels(samples: Sequence[GestureSample]) -> np.ndarray:
    return np.array([s.referent.class_index for s in samples], dtype=np.int64)


def _num_classes(samples, config: ResolverConfig, num_classes: int | None) -> int:
    if num_classes:
        return num_classes
    if config.num_classes:
        return config.num_classes
    return int(_labels(samples).max()) + 1


def _matrix(samples, embeddings: Mapping[str, np.ndarray]) -> np.ndarray:
    try:
        return np.stack([np.asarray(embeddings[s.sample_id], np.float64) for s in samples])
    except KeyError as exc:
        raise KeyError(f"no embedding for sample {exc.args[0]}") from None


def _majority(y_train: np.ndarray, y_test: np.ndarray) -> float:
    if not len(y_test) or not len(y_train):
        return float("nan")
    return float((y_test == np.bincount(y_train).argmax()).mean())


def round_folds(samples: Sequence[GestureSample]) -> list[tuple[int, list[GestureSample], list[GestureSample]]]:
    """Leave-one-round-out partitions: (held-out round, train samples, test samples)."""
    labeled = [s for s in samples if s.referent is not None]
    folds = []
    for r in range(1, NUM_ROUNDS + 1):
        test = [s for s in labeled if s.round == r]
        if not test:
            warnings.warn(f"round {r} has no labeled samples; fold skipped")
            continue
        train = [s for s in labeled if s.round != r]
        folds.append((r, train, test))
    return folds


def _fit_folds(labeled, embeddings, config, seed, k):
    folds = round_folds(labeled)
    tasks = [(_matrix(train, embeddings), _labels(train), derive_seed(seed, "fold", r)) for r, train, _ in folds]
    return folds, train_resolvers(tasks, config, k)


def _fold_report(name, folds, models, test_embeddings, k, seed, config) -> ExperimentReport:
    results = []
    for (r, train, test), model in zip(folds, models):
        y_test = _labels(test)
        acc = model.accuracy(_matrix(test, test_embeddings), y_test)
        results.append(FoldResult(r, acc, len(train), len(test), _majority(_labels(train), y_test),
                                  [s.sample_id for s in test], [s.sample_id for s in train]))
    report = ExperimentReport(name, results, k, seed, config.to_dict())
    if report.n_test:
        lo, hi = binomial_ci(report.correct, report.n_test)
        report.stats["accuracy_ci95"] = [lo, hi]
        report.stats["binomial_p_vs_chance"] = float(
            stats.binomtest(report.correct, report.n_test, report.chance, alternative="greater").pvalue)
        report.stats["majority_rate"] = float(np.mean([f.majority_rate for f in results]))
    return report


def leave_one_round_out(samples: Sequence[GestureSample], embeddings: Mapping[str, np.ndarray],
                        config: ResolverConfig = ResolverConfig(), seed: int = 0,
                        test_embeddings: Mapping[str, np.ndarray] | None = None,
                        num_classes: int | None = None, name: str = "leave_one_round_out") -> ExperimentReport:
    """Hold out each round in turn, train on the other rounds of every dialogue.

    ``test_embeddings`` (default: ``embeddings``) supplies the held-out vectors,
    which lets the noise experiment perturb only test gestures.
    """
    test_embeddings = embeddings if test_embeddings is None else test_embeddings
    labeled = [s for s in samples if s.referent is not None]
    k = _num_classes(labeled, config, num_classes)
    folds, models = _fit_folds(labeled, embeddings, config, seed, k)
    return _fold_report(name, folds, models, test_embeddings, k, seed, config)


def concat_embeddings(gesture: np.ndarray, semantic: np.ndarray | None,
                      null_vector: np.ndarray | None = None) -> np.ndarray:
    """Concatenate (gesture, semantic); a missing semantic vector becomes ``null_vector``."""
    if semantic is None:
        if null_vector is None:
            raise ValueError("semantic vector missing and no null-utterance vector given")
        semantic = null_vector
    return np.concatenate([np.asarray(gesture), np.asarray(semantic)])


def concat_tables(gesture: Mapping[str, np.ndarray], semantic: Mapping[str, np.ndarray | None],
                  null_vector: np.ndarray | None = None) -> dict[str, np.ndarray]:
    return {sid: concat_embeddings(g, semantic.get(sid), null_vector) for sid, g in gesture.items()}


# ---------------------------------------------------------------------------
# dialogue history


@dataclass
class HistoryReport:
    baseline: dict[int, float]
    dialogue_specific: dict[int, float]
    points: list[dict]
    parity: list[dict]
    t_test: tuple[float, float]
    spearman_baseline: tuple[float, float]
    spearman_dialogue_specific: tuple[float, float]
    seed: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "baseline_by_round": {str(k): v for k, v in self.baseline.items()},
            "dialogue_specific_by_round": {str(k): v for k, v in self.dialogue_specific.items()},
            "points": self.points,
            "parity": self.parity,
            "t_test": {"t": self.t_test[0], "p": self.t_test[1]},
            "spearman_baseline": {"rho": self.spearman_baseline[0], "p": self.spearman_baseline[1]},
            "spearman_dialogue_specific": {"rho": self.spearman_dialogue_specific[0],
                                           "p": self.spearman_dialogue_specific[1]},
            "seed": self.seed,
            "config": self.config,
            "config_fingerprint": fingerprint({**self.config, "seed": self.seed}),
        }


def stratified_subsample(samples: Sequence[GestureSample], count: int, rng: np.random.Generator) -> list[GestureSample]:
    """Draw ``count`` samples keeping class proportions (largest-remainder allocation)."""
    if count >= len(samples):
        return list(samples)
    if count <= 0:
        return []
    by_class: dict[int, list[GestureSample]] = {}
    for s in samples:
        by_class.setdefault(s.referent.class_index, []).append(s)
    classes = sorted(by_class)
    quotas = np.array([len(by_class[c]) * count / len(samples) for c in classes])
    alloc = np.floor(quotas).astype(int)
    remainder = count - alloc.sum()
    for i in np.argsort(-(quotas - alloc), kind="stable")[:remainder]:
        alloc[i] += 1
    chosen = []
    for c, a in zip(classes, alloc):
        pool = by_class[c]
        idx = rng.choice(len(pool), size=a, replace=False)
        chosen += [pool[i] for i in sorted(idx)]
    return chosen


def history_training_sets(samples: Sequence[GestureSample], seed: int = 0):
    """Yield ``(dialogue, round, baseline_train, specific_train, test)`` for every target dialogue and round."""
    labeled = [s for s in samples if s.referent is not None]
    dialogues = sorted({s.dialogue_id for s in labeled})
    if len(dialogues) < 2:
        raise ProtocolError("dialogue-history experiment needs at least two dialogues")
    for d in dialogues:
        others = [s for s in labeled if s.dialogue_id != d]
        target = [s for s in labeled if s.dialogue_id == d]
        for n in range(1, NUM_ROUNDS + 1):
            test = [s for s in target if s.round == n]
            history = [s for s in target if s.round < n]
            if len(history) > len(others):
                raise ProtocolError(f"dialogue {d} history exceeds the other-dialogue pool")
            rng = np.random.default_rng(derive_seed(seed, "history", d, n))
            kept = stratified_subsample(others, len(others) - len(history), rng)
            yield d, n, others, history + kept, test


def dialogue_history_experiment(samples: Sequence[GestureSample], embeddings: Mapping[str, np.ndarray],
                                config: ResolverConfig = ResolverConfig(), seed: int = 0,
                                num_classes: int | None = None) -> HistoryReport:
    """Baseline (other dialogues only) vs dialogue-specific (plus earlier rounds of the target dialogue).

    Both models are trained on the same number of samples at every round;
    in round 1 their training sets coincide.
    """
    labeled = [s for s in samples if s.referent is not None]
    k = _num_classes(labeled, config, num_classes)
    plans = list(history_training_sets(labeled, seed))
    parity = []
    baseline_tasks: dict[str, tuple] = {}
    specific_tasks = []
    for d, n, base, spec, test in plans:
        ok = len(base) == len(spec)
        parity.append({"dialogue": d, "round": n, "baseline_n": len(base), "dialogue_specific_n": len(spec),
                       "pass": ok})
        if not ok:
            raise ProtocolError(f"sample-count parity violated for dialogue {d} round {n}")
        init_seed = derive_seed(seed, "history-resolver", d)
        if d not in baseline_tasks:
            baseline_tasks[d] = (_matrix(base, embeddings), _labels(base), init_seed)
        if n > 1:
            specific_tasks.append((d, n, (_matrix(spec, embeddings), _labels(spec), init_seed)))

    dialogues = list(baseline_tasks)
    models = train_resolvers([baseline_tasks[d] for d in dialogues] + [t for _, _, t in specific_tasks], config, k)
    base_models = dict(zip(dialogues, models[:len(dialogues)]))
    spec_models = {(d, n): mdl for (d, n, _), mdl in zip(specific_tasks, models[len(dialogues):])}

    points = []
    for d, n, _, _, test in plans:
        if not test:
            continue
        x, y = _matrix(test, embeddings), _labels(test)
        acc_b = base_models[d].accuracy(x, y)
        # round 1: identical training set and seed, so the dialogue-specific model is the baseline
        acc_s = acc_b if n == 1 else spec_models[(d, n)].accuracy(x, y)
        points.append({"dialogue": d, "round": n, "n_test": len(test), "baseline": acc_b, "dialogue_specific": acc_s})

    def by_round(key):
        return {r: float(np.mean([p[key] for p in points if p["round"] == r]))
                for r in range(1, NUM_ROUNDS + 1) if any(p["round"] == r for p in points)}

    rounds = [p["round"] for p in points]
    base_acc = [p["baseline"] for p in points]
    spec_acc = [p["dialogue_specific"] for p in points]
    return HistoryReport(
        baseline=by_round("baseline"),
        dialogue_specific=by_round("dialogue_specific"),
        points=points,
        parity=parity,
        t_test=_safe(ttest_independent, spec_acc, base_acc),
        spearman_baseline=_safe(spearman, rounds, base_acc),
        spearman_dialogue_specific=_safe(spearman, rounds, spec_acc),
        seed=seed,
        config=config.to_dict(),
    )


def _safe(fn, *args) -> tuple[float, float]:
    try:
        return fn(*args)
    except UndefinedCorrelationError:
        return float("nan"), float("nan")


# ---------------------------------------------------------------------------
# noise robustness


@dataclass
class NoiseRow:
    sigma: float
    mean: float
    sd: float
    report: ExperimentReport


def noise_robustness(samples: Sequence[GestureSample],
                     embed_fn: Callable[[Sequence[GestureSample], Callable[[GestureSample], SkeletonSequence] | None], Mapping[str, np.ndarray]],
                     sigmas: Sequence[float] = DEFAULT_SIGMAS, config: ResolverConfig = ResolverConfig(),
                     seed: int = 0, num_classes: int | None = None) -> list[NoiseRow]:
    """Leave-one-round-out accuracy with test skeletons jittered by each sigma (pixels).

    ``embed_fn(samples, transform)`` re-embeds samples after applying ``transform``
    to each skeleton (``None`` for clean input). Resolvers train on clean embeddings.
    """
    if any(s < 0 for s in sigmas):
        raise ValueError("sigmas must be non-negative")
    labeled = [s for s in samples if s.referent is not None]
    k = _num_classes(labeled, config, num_classes)
    clean = embed_fn(labeled, None)
    # resolvers depend only on clean training data, so one set serves every sigma
    folds, models = _fit_folds(labeled, clean, config, seed, k)
    rows = []
    for sigma in sigmas:
        def jitter(s, sigma=sigma):
            return add_gaussian_jitter(s.skeleton, sigma, derive_seed(seed, "jitter", s.sample_id, sigma))
        noisy = clean if sigma == 0 else embed_fn(labeled, jitter)
        rep = _fold_report(f"noise_sigma_{sigma:g}", folds, models, noisy, k, seed, config)
        rows.append(NoiseRow(float(sigma), rep.mean, rep.sd, rep))
    return rows
