"""Downstream evaluation: linear probes on frozen embeddings and the robustness/case-study experiments."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1


class DegenerateFitError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class EvalConfig:
    ratios: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    repeats: int = 10
    ridge_lambda: float = 1.0
    svc_lambda: float = 0.01
    svc_epochs: int = 2000
    proportions: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    robustness_ratio: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not self.ratios or any(not 0.0 < r < 1.0 for r in self.ratios):
            raise ValueError("training ratios must lie in (0, 1)")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if self.ridge_lambda < 0 or self.svc_lambda <= 0 or self.svc_epochs < 1:
            raise ValueError("invalid probe hyperparameters")


# ---------------------------------------------------------------------------
# splitmix64 counter rng


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def stream_seed(seed: int, *counters: int) -> int:
    """Derive an independent stream seed by absorbing each counter through splitmix64."""
    state = seed & MASK64
    for c in counters:
        state, out = splitmix64(state ^ (c & MASK64))
        state = out
    return state


def permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates shuffle driven by splitmix64; ``j = next() % (i + 1)`` for ``i = n-1 .. 1``."""
    perm = list(range(n))
    state = seed & MASK64
    for i in range(n - 1, 0, -1):
        state, out = splitmix64(state)
        j = out % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


def split_indices(n: int, ratio: float, seed: int, ratio_idx: int = 0, repeat: int = 0) -> tuple[np.ndarray, np.ndarray]:
    n_train = int(math.floor(ratio * n + 0.5))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"ratio {ratio} leaves an empty train or test split for {n} samples")
    perm = permutation(n, stream_seed(seed, ratio_idx, repeat))
    return perm[:n_train], perm[n_train:]


# ---------------------------------------------------------------------------
# probes


def _standardize(train_x: np.ndarray, test_x: np.ndarray):
    mu = train_x.mean(0)
    sd = train_x.std(0)
    sd[sd == 0] = 1.0
    return (train_x - mu) / sd, (test_x - mu) / sd


def ridge_fit(train_x, train_y, lam: float = 1.0, fit_intercept: bool = True, standardize: bool = True):
    """Closed-form ridge. Returns ``(coef, intercept, mu, sd)`` for the raw feature space."""
    x = np.asarray(train_x, dtype=np.float64)
    y = np.asarray(train_y, dtype=np.float64)
    if lam < 0:
        raise ValueError("ridge lambda must be non-negative")
    mu = x.mean(0) if standardize else np.zeros(x.shape[1])
    sd = x.std(0) if standardize else np.ones(x.shape[1])
    sd = np.where(sd == 0, 1.0, sd)
    xs = (x - mu) / sd
    y_off = y.mean() if fit_intercept else 0.0
    x_off = xs.mean(0) if fit_intercept else np.zeros(x.shape[1])
    xc, yc = xs - x_off, y - y_off
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    if lam == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SingularSystemError("ridge system is singular (lambda=0 with rank-deficient features)")
    coef = np.linalg.solve(gram, xc.T @ yc)
    intercept = y_off - x_off @ coef
    return coef, intercept, mu, sd


def ridge_fit_predict(train_x, train_y, test_x, lam: float = 1.0, fit_intercept: bool = True, standardize: bool = True) -> np.ndarray:
    coef, intercept, mu, sd = ridge_fit(train_x, train_y, lam, fit_intercept, standardize)
    return ((np.asarray(test_x, dtype=np.float64) - mu) / sd) @ coef + intercept


def linear_svc_fit(train_x, train_y, lam: float = 0.01, epochs: int = 2000) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """L2-regularised hinge loss by full-batch subgradient descent with step ``1/(lam*t)``.

    Features are standardised on the training split and a constant column is
    appended for the bias (regularised like the other weights). Returns
    ``(w, mu, sd)``.
    """
    x = np.asarray(train_x, dtype=np.float64)
    y01 = np.asarray(train_y)
    classes = np.unique(y01)
    if len(classes) < 2:
        raise DegenerateFitError("training labels contain a single class")
    if not set(classes.tolist()) <= {0, 1}:
        raise ValueError("labels must be binary 0/1")
    y = np.where(y01 == 1, 1.0, -1.0)
    mu, sd = x.mean(0), x.std(0)
    sd = np.where(sd == 0, 1.0, sd)
    xa = np.hstack([(x - mu) / sd, np.ones((len(x), 1))])
    n = len(xa)
    w = np.zeros(xa.shape[1])
    for t in range(1, epochs + 1):
        active = y * (xa @ w) < 1.0
        grad = lam * w - (y[active, None] * xa[active]).sum(0) / n
        w = w - grad / (lam * t)
    return w, mu, sd


def linear_svc_fit_predict(train_x, train_y, test_x, lam: float = 0.01, epochs: int = 2000) -> np.ndarray:
    w, mu, sd = linear_svc_fit(train_x, train_y, lam, epochs)
    xt = np.asarray(test_x, dtype=np.float64)
    scores = np.hstack([(xt - mu) / sd, np.ones((len(xt), 1))]) @ w
    return (scores > 0).astype(np.int64)


# ---------------------------------------------------------------------------
# metrics


def mae(y, yhat) -> float:
    y, yhat = np.asarray(y, float), np.asarray(yhat, float)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    return float(np.abs(y - yhat).mean())


def r2(y, yhat) -> float | None:
    """Coefficient of determination; ``None`` when the targets are constant."""
    y, yhat = np.asarray(y, float), np.asarray(yhat, float)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        return None
    return 1.0 - float(((y - yhat) ** 2).sum()) / ss_tot


def accuracy(y, yhat) -> float:
    y, yhat = np.asarray(y), np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    return float((y == yhat).mean())


def f1(y, yhat) -> float:
    y, yhat = np.asarray(y), np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch")
    tp = int(((y == 1) & (yhat == 1)).sum())
    fp = int(((y == 0) & (yhat == 1)).sum())
    fn = int(((y == 1) & (yhat == 0)).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def metrics(y_true, y_pred, task: str) -> dict[str, float | None]:
    if task == "md":
        return {"mae": mae(y_true, y_pred), "r2": r2(y_true, y_pred)}
    if task == "glaucoma":
        return {"acc": accuracy(y_true, y_pred), "f1": f1(y_true, y_pred)}
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# reports

TASK_METRICS = {"md": ("mae", "r2"), "glaucoma": ("acc", "f1")}
REPORT_COLUMNS = ("method", "task", "ratio", "metric", "mean", "std", "n")


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)

    def get(self, task: str, ratio: float, metric: str, method: str | None = None) -> dict:
        for r in self.rows:
            if r["task"] == task and r["metric"] == metric and math.isclose(r["ratio"], ratio) and (method is None or r["method"] == method):
                return r
        raise KeyError((task, ratio, metric, method))

    def task_rows(self) -> set[tuple[str, str, float]]:
        return {(r["method"], r["task"], r["ratio"]) for r in self.rows}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                mean = "undefined" if r["mean"] is None else repr(r["mean"])
                std = "undefined" if r["std"] is None else repr(r["std"])
                w.writerow([r["method"], r["task"], repr(r["ratio"]), r["metric"], mean, std, r["n"]])


def read_report(path: str | Path) -> MetricsReport:
    rep = MetricsReport()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected report columns {reader.fieldnames}")
        for row in reader:
            rep.rows.append({
                "method": row["method"],
                "task": row["task"],
                "ratio": float(row["ratio"]),
                "metric": row["metric"],
                "mean": None if row["mean"] == "undefined" else float(row["mean"]),
                "std": None if row["std"] == "undefined" else float(row["std"]),
                "n": int(row["n"]),
            })
    return rep


def _aggregate(values: list[float | None]) -> tuple[float | None, float | None, int]:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return None, None, 0
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return mean, std, len(vals)


def align(ids: np.ndarray, emb: np.ndarray, manifest) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embedding rows ordered like the manifest, with MD and glaucoma labels."""
    index = {int(i): k for k, i in enumerate(ids)}
    missing = [e.image_id for e in manifest.entries if e.image_id not in index]
    if missing:
        raise KeyError(f"embeddings missing for {len(missing)} manifest ids, e.g. {missing[:3]}")
    rows = [index[e.image_id] for e in manifest.entries]
    return emb[rows].astype(np.float64), manifest.md, manifest.glaucoma


def downstream_sweep(ids, emb, manifest, cfg: EvalConfig, method: str = "eyelearn", ratios: Sequence[float] | None = None) -> MetricsReport:
    """Repeated random splits per training ratio; ridge on MD and linear SVC on glaucoma."""
    cfg.validate()
    x, md, gl = align(np.asarray(ids), np.asarray(emb), manifest)
    report = MetricsReport()
    for ri, ratio in enumerate(ratios if ratios is not None else cfg.ratios):
        per = {m: [] for ms in TASK_METRICS.values() for m in ms}
        for rep in range(cfg.repeats):
            tr, te = split_indices(len(x), ratio, cfg.seed, ri, rep)
            pred = ridge_fit_predict(x[tr], md[tr], x[te], cfg.ridge_lambda)
            for k, v in metrics(md[te], pred, "md").items():
                per[k].append(v)
            try:
                lab = linear_svc_fit_predict(x[tr], gl[tr], x[te], cfg.svc_lambda, cfg.svc_epochs)
            except DegenerateFitError:
                lab = np.full(len(te), gl[tr][0])
            for k, v in metrics(gl[te], lab, "glaucoma").items():
                per[k].append(v)
        for task, names in TASK_METRICS.items():
            for name in names:
                mean, std, n = _aggregate(per[name])
                report.rows.append({"method": method, "task": task, "ratio": float(ratio), "metric": name, "mean": mean, "std": std, "n": n})
    return report


def artifact_robustness(model, maps, manifest, cfg: EvalConfig, method: str = "eyelearn", mask_seed: int = 0) -> MetricsReport:
    """Inject artifacts at each proportion, re-embed, and probe at a single training ratio.

    The ``ratio`` column of the returned report holds the artifact proportion.
    """
    from .dataio import generate_artifact_mask
    from .trainer import embed_dataset

    h, w = maps[0].pixels.shape
    out = MetricsReport()
    for p in cfg.proportions:
        if p == 0:
            masks = None
        else:
            masks = np.stack([generate_artifact_mask(w, h, p, seed=stream_seed(mask_seed, i, int(round(p * 1000)))) for i in range(len(maps))])
        ids, emb = embed_dataset(model, maps, masks)
        rep = downstream_sweep(ids, emb, manifest, cfg, method, ratios=[cfg.robustness_ratio])
        for r in rep.rows:
            out.rows.append(dict(r, ratio=float(p)))
    return out


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


def embedding_stability(model, maps, fraction: float = 0.2, mask_seed: int = 0) -> dict[str, float]:
    """Cosine similarity between clean and masked embeddings of the same map, against cross-map similarity."""
    from .dataio import generate_artifact_mask
    from .trainer import embed_dataset

    h, w = maps[0].pixels.shape
    masks = np.stack([generate_artifact_mask(w, h, fraction, seed=stream_seed(mask_seed, i)) for i in range(len(maps))])
    _, clean = embed_dataset(model, maps)
    _, masked = embed_dataset(model, maps, masks)
    sim = cosine_matrix(clean.astype(np.float64), masked.astype(np.float64))
    same = float(np.diag(sim).mean())
    cross_clean = cosine_matrix(clean.astype(np.float64), clean.astype(np.float64))
    off = ~np.eye(len(maps), dtype=bool)
    return {"same_image": same, "cross_image": float(cross_clean[off].mean()), "cross_masked": float(sim[off].mean())}


def pearson_matrix(vectors: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Pairwise Pearson correlations between rows; rows with zero variance give NaN and are reported."""
    v = np.asarray(vectors, dtype=np.float64)
    c = v - v.mean(1, keepdims=True)
    norm = np.sqrt((c * c).sum(1))
    undefined = [i for i, n in enumerate(norm) if n == 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        z = c / norm[:, None]
    out = z @ z.T
    out = (out + out.T) / 2.0
    ok = norm > 0
    np.fill_diagonal(out, np.where(ok, 1.0, np.nan))
    return np.clip(out, -1.0, 1.0), undefined


@dataclass
class CaseStudy:
    ids: list[int]
    raw: np.ndarray
    embedded: np.ndarray
    undefined: list[int]


def correlation_case_study(model, maps, masks: np.ndarray | None, ids: Sequence[int]) -> CaseStudy:
    """Pearson correlations between masked raw pixels and between learned embeddings of selected maps."""
    from .trainer import embed_dataset

    if len(ids) < 2:
        raise ValueError("case study needs at least two images")
    index = {m.image_id: k for k, m in enumerate(maps)}
    rows = [index[i] for i in ids]
    sel = [maps[k] for k in rows]
    mk = masks[rows] if masks is not None else np.ones((len(rows), *sel[0].pixels.shape), dtype=np.uint8)
    raw_vec = np.stack([m.pixels.astype(np.float64).ravel() * k.ravel() for m, k in zip(sel, mk)])
    _, emb = embed_dataset(model, sel, mk)
    a, ua = pearson_matrix(raw_vec)
    b, ub = pearson_matrix(emb)
    return CaseStudy(list(ids), a, b, sorted({ids[i] for i in ua + ub}))


def write_matrix_csv(path: str | Path, ids: Sequence[int], mat: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", *ids])
        for i, row in zip(ids, mat):
            w.writerow([i, *("undefined" if not np.isfinite(v) else repr(float(v)) for v in row)])
