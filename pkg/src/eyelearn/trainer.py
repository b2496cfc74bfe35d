"""Training loop: masked reconstruction plus intra/inter contrastive regularisation.

Each batch follows the same recipe: sample images and artifact masks, build the
masked inputs and two augmented views, encode everything in one pass, push the
masked-input embeddings to the memory bank, decode the masked inputs, and take
an Adam step on the weighted sum of the three losses. After every epoch the
whole training set is re-embedded with artifact-free masks and clustered, and
the bank labels are refreshed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import checkpoint
from .bank import MemoryBank, refresh_labels
from .dataio import AugmentConfig, ThicknessMap, apply_affine, generate_mask_pool, sample_affine
from .losses import (
    ContrastConfig,
    ReconLossWeights,
    combined_loss,
    inter_contrastive_loss,
    intra_contrastive_loss,
    recon_loss,
)
from .network import THICKNESS_SCALE, ArchConfig, EyeLearnModel, embed_images

log = logging.getLogger(__name__)

ABLATIONS = ("full", "recon_only", "intra_only", "inter_only")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class MaskConfig:
    pool_size: int = 1000
    fraction_range: tuple[float, float] = (0.1, 0.5)
    shape_mix: dict[str, float] = field(default_factory=lambda: {"rectangle": 1.0, "ellipse": 1.0, "wedge": 1.0})
    seed: int = 1


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 4
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    recon: ReconLossWeights = field(default_factory=ReconLossWeights)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    n_clusters: int = 7
    bank_capacity: int = 800
    ablation: str = "full"
    view_artifacts: bool = False  # give augmented views their own pool masks too
    model_seed: int = 0
    data_seed: int = 0
    sampling_seed: int = 0
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    checkpoint_every: int = 1

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.n_clusters < 1 or self.bank_capacity < 1:
            raise ValueError("n_clusters and bank_capacity must be positive")
        if self.bank_capacity <= self.contrast.n_negatives:
            raise ValueError("bank capacity must exceed the number of negatives")
        self.recon.validate()
        self.contrast.validate()

    @property
    def effective_weights(self) -> tuple[float, float]:
        w1 = 0.0 if self.ablation in ("recon_only", "inter_only") else self.contrast.w1
        w2 = 0.0 if self.ablation in ("recon_only", "intra_only") else self.contrast.w2
        return w1, w2


@dataclass
class TrainLog:
    batches: list[dict[str, Any]] = field(default_factory=list)
    epochs: list[dict[str, Any]] = field(default_factory=list)

    BATCH_FIELDS = (
        "epoch", "batch", "total", "recon", "valid", "invalid", "perceptual", "style_out", "style_comp", "tv",
        "intra", "inter", "intra_skipped", "inter_skipped",
    )
    EPOCH_FIELDS = ("epoch", "total", "recon", "intra", "inter", "inertia", "label_change", "val_recon")

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([b[key] for b in self.batches], dtype=np.float64)

    def write_csv(self, batch_path: str | Path, epoch_path: str | Path) -> None:
        for path, rows, cols in ((batch_path, self.batches, self.BATCH_FIELDS), (epoch_path, self.epochs, self.EPOCH_FIELDS)):
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
                w.writeheader()
                for r in rows:
                    w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def maps_to_tensor(maps: Sequence[ThicknessMap] | np.ndarray) -> torch.Tensor:
    """Stack maps into a scaled ``(N, 1, H, W)`` float32 tensor."""
    arr = np.stack([m.pixels for m in maps]) if not isinstance(maps, np.ndarray) else maps
    return torch.from_numpy(np.asarray(arr, dtype=np.float32) / np.float32(THICKNESS_SCALE)).unsqueeze(1)


def masks_to_tensor(masks: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(masks, dtype=np.float32)).unsqueeze(1)


@dataclass
class TrainState:
    model: EyeLearnModel
    optimizer: torch.optim.Adam
    bank: MemoryBank
    data_rng: np.random.Generator
    sample_rng: np.random.Generator
    assignment: dict[int, int] = field(default_factory=dict)
    epoch: int = 0
    log: TrainLog = field(default_factory=TrainLog)


def build_state(arch: ArchConfig, cfg: TrainConfig, extractor=None) -> TrainState:
    arch = dataclasses.replace(arch, init_seed=cfg.model_seed)
    model = EyeLearnModel(arch, extractor)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)
    return TrainState(
        model=model,
        optimizer=opt,
        bank=MemoryBank(cfg.bank_capacity, arch.embedding_dim),
        data_rng=np.random.default_rng(cfg.data_seed),
        sample_rng=np.random.default_rng(cfg.sampling_seed),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, state: TrainState, cfg: TrainConfig | None = None) -> None:
    from .config import to_dict

    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    for idx, st in opt["state"].items():
        for key, val in st.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(val)
    bank = state.bank.state_dict()
    tensors["bank.embeddings"] = bank.pop("embeddings")
    ids = sorted(state.assignment)
    meta = {
        "arch": to_dict(state.model.arch),
        "train": to_dict(cfg) if cfg is not None else None,
        "epoch": state.epoch,
        "param_groups": opt["param_groups"],
        "bank": bank,
        "assignment": [[i, state.assignment[i]] for i in ids],
        "rng": {"data": state.data_rng.bit_generator.state, "sample": state.sample_rng.bit_generator.state},
        "log": {"batches": state.log.batches, "epochs": state.log.epochs},
    }
    checkpoint.save(path, tensors, meta)


def load_checkpoint(path: str | Path, extractor=None) -> tuple[TrainState, TrainConfig | None]:
    from .config import from_dict

    tensors, meta = checkpoint.load(path)
    arch = from_dict(ArchConfig, meta["arch"])
    cfg = from_dict(TrainConfig, meta["train"]) if meta.get("train") else None
    model = EyeLearnModel(arch, extractor)
    model_sd = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    missing = set(model.state_dict()) - set(model_sd)
    if extractor is not None:
        model_sd = {k: v for k, v in model_sd.items() if not k.startswith("extractor.")}
    model.load_state_dict(model_sd, strict=extractor is None)
    if missing and extractor is None:
        raise checkpoint.CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    model.epoch = meta["epoch"]
    groups = meta["param_groups"]
    opt = torch.optim.Adam(model.trainable_parameters(), lr=groups[0]["lr"])
    state_tensors: dict[int, dict[str, torch.Tensor]] = {}
    for k, v in tensors.items():
        if k.startswith("optim."):
            _, idx, key = k.split(".", 2)
            state_tensors.setdefault(int(idx), {})[key] = v
    opt.load_state_dict({"state": state_tensors, "param_groups": groups})
    bank_meta = dict(meta["bank"], embeddings=tensors["bank.embeddings"])
    data_rng, sample_rng = np.random.default_rng(), np.random.default_rng()
    data_rng.bit_generator.state = meta["rng"]["data"]
    sample_rng.bit_generator.state = meta["rng"]["sample"]
    state = TrainState(
        model=model,
        optimizer=opt,
        bank=MemoryBank.from_state_dict(bank_meta),
        data_rng=data_rng,
        sample_rng=sample_rng,
        assignment={int(i): int(c) for i, c in meta["assignment"]},
        epoch=meta["epoch"],
        log=TrainLog(meta["log"]["batches"], meta["log"]["epochs"]),
    )
    return state, cfg


def load_model(path: str | Path, extractor=None) -> EyeLearnModel:
    return load_checkpoint(path, extractor)[0].model


# ---------------------------------------------------------------------------
# training


def _augmented_views(pixels: np.ndarray, artifacts: np.ndarray | None, cfg: AugmentConfig, rng: np.random.Generator):
    """Augment maps (µm) carrying simulated artifacts; returns scaled views and their validity masks.

    With ``artifacts`` None the views start from clean maps and only the fill-in
    pixels of the transform are invalid.
    """
    h, w = pixels.shape[-2:]
    if artifacts is None:
        artifacts = np.ones((len(pixels), h, w), dtype=np.uint8)
    views, masks = [], []
    for img, art in zip(pixels, artifacts):
        v, m = apply_affine(img * art, art, sample_affine(cfg, h, w, rng))
        views.append(v)
        masks.append(m)
    return maps_to_tensor(np.stack(views)), masks_to_tensor(np.stack(masks))


@torch.no_grad()
def evaluate_recon(model: EyeLearnModel, images: torch.Tensor, masks: torch.Tensor, weights: ReconLossWeights, batch_size: int = 32) -> float:
    """Mean reconstruction loss in inference mode over a held-out set."""
    was = model.training
    model.eval()
    total, n = 0.0, 0
    try:
        for i in range(0, len(images), batch_size):
            x, m = images[i : i + batch_size], masks[i : i + batch_size]
            _, out = model(x * m, m)
            loss, _ = recon_loss(x, out, m, weights, model.extractor)
            total += float(loss) * len(x)
            n += len(x)
    finally:
        model.train(was)
    return total / max(n, 1)


def train_step(state: TrainState, cfg: TrainConfig, images: torch.Tensor, pixels: np.ndarray, ids: np.ndarray, mask_pool: torch.Tensor, batch_idx: np.ndarray) -> dict[str, Any]:
    model, bank = state.model, state.bank
    k = len(batch_idx)
    x = images[batch_idx]
    m = mask_pool[state.data_rng.choice(len(mask_pool), size=k)]
    views = []
    for _ in range(2):
        art = None
        if cfg.view_artifacts:
            art = mask_pool[state.data_rng.choice(len(mask_pool), size=k), 0].numpy().astype(np.uint8)
        views.append(_augmented_views(pixels[batch_idx], art, cfg.augment, state.data_rng))
    (v1, m1), (v2, m2) = views
    batch_ids = [int(i) for i in ids[batch_idx]]

    h, stack = model.encode(torch.cat([x * m, v1, v2]), torch.cat([m, m1, m2]))
    for i, image_id in enumerate(batch_ids):
        bank.push(image_id, h[i], state.assignment.get(image_id))
    out, _ = model.decode([(f[:k], mk[:k]) for f, mk in stack])
    rec, parts = recon_loss(x, out, m, cfg.recon, model.extractor)

    w1, w2 = cfg.effective_weights
    intra = inter = h.new_zeros(())
    intra_skip = inter_skip = 0
    if w1 > 0:
        intra, intra_skip = intra_contrastive_loss(
            model.project(h[k : 2 * k]), model.project(h[2 * k :]), batch_ids, bank, model.project, cfg.contrast, state.sample_rng
        )
    if w2 > 0:
        labels = [state.assignment.get(i) for i in batch_ids]
        inter, inter_skip = inter_contrastive_loss(
            model.project(h[:k]), batch_ids, labels, bank, model.project, cfg.contrast, state.sample_rng
        )
    total = combined_loss(rec, intra, inter, w1, w2)
    if not torch.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss at epoch {state.epoch + 1} for image ids {batch_ids}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    rec_parts = {name: float(v.detach()) for name, v in parts.items()}
    return {
        "total": float(total.detach()), "recon": float(rec.detach()), **rec_parts,
        "intra": float(intra.detach()), "inter": float(inter.detach()), "intra_skipped": intra_skip, "inter_skipped": inter_skip,
    }


def train(
    maps: Sequence[ThicknessMap],
    mask_pool: np.ndarray | None,
    cfg: TrainConfig,
    arch: ArchConfig | None = None,
    mask_cfg: MaskConfig | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    val_maps: Sequence[ThicknessMap] | None = None,
    val_masks: np.ndarray | None = None,
    stop_after: int | None = None,
    extractor=None,
) -> tuple[EyeLearnModel, TrainLog]:
    """Train from scratch (or resume from a checkpoint) up to ``cfg.epochs`` epochs.

    ``stop_after`` ends the run early after that many total epochs, which is how
    interrupted runs are simulated. With ``out_dir`` set, a checkpoint is written
    every ``cfg.checkpoint_every`` epochs and the logs are written as CSV.
    """
    cfg.validate()
    if not maps:
        raise ValueError("training set is empty")
    arch = arch or ArchConfig()
    h, w = maps[0].pixels.shape
    if h != arch.input_size or w != arch.input_size:
        raise ValueError(f"maps are {w}x{h} but the architecture expects {arch.input_size}x{arch.input_size}")
    if len(maps) < cfg.batch_size:
        raise ValueError("fewer maps than one batch")
    if mask_pool is None:
        mc = mask_cfg or MaskConfig()
        mask_pool = generate_mask_pool(mc.pool_size, w, h, mc.fraction_range, mc.shape_mix, mc.seed)
    if mask_pool.shape[1:] != (h, w):
        raise ValueError("mask pool shape does not match the maps")
    torch.use_deterministic_algorithms(True)

    if resume is not None:
        state, _ = load_checkpoint(resume, extractor)
    else:
        state = build_state(arch, cfg, extractor)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    pixels = np.stack([m.pixels for m in maps]).astype(np.float32)
    images = maps_to_tensor(pixels)
    ids = np.array([m.image_id for m in maps], dtype=np.int64)
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("duplicate image ids in training set")
    masks = masks_to_tensor(mask_pool)
    val = None
    if val_maps is not None:
        val = (maps_to_tensor(val_maps), masks_to_tensor(val_masks))

    model = state.model
    model.train()
    n_batches = len(maps) // cfg.batch_size
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while state.epoch < last:
        epoch = state.epoch + 1
        perm = state.data_rng.permutation(len(maps))
        records = []
        for b in range(n_batches):
            batch_idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            try:
                rec = train_step(state, cfg, images, pixels, ids, masks, batch_idx)
            except TrainingDivergedError:
                if out:
                    (out / "diverged.json").write_text(json.dumps({"epoch": epoch, "batch": b, "ids": ids[batch_idx].tolist()}))
                raise
            rec = {"epoch": epoch, "batch": b, **rec}
            records.append(rec)
            state.log.batches.append(rec)

        cm = refresh_labels(state.bank, model, images, ids, cfg.n_clusters, state.sample_rng, cfg.kmeans_max_iters, cfg.kmeans_tol)
        new_assign = cm.assignment(ids)
        changed = sum(state.assignment.get(i) != c for i, c in new_assign.items()) / len(new_assign)
        state.assignment = new_assign
        state.epoch = epoch
        model.epoch = epoch
        ep = {
            "epoch": epoch,
            "total": float(np.mean([r["total"] for r in records])),
            "recon": float(np.mean([r["recon"] for r in records])),
            "intra": float(np.mean([r["intra"] for r in records])),
            "inter": float(np.mean([r["inter"] for r in records])),
            "inertia": cm.inertia,
            "label_change": changed,
            "val_recon": evaluate_recon(model, *val, cfg.recon) if val else math.nan,
        }
        state.log.epochs.append(ep)
        log.info(
            "epoch %d: loss %.4f recon %.4f intra %.4f inter %.4f val %.4f",
            epoch, ep["total"], ep["recon"], ep["intra"], ep["inter"], ep["val_recon"],
        )
        if out and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_epoch{epoch:03d}.ckpt", state, cfg)
    if out:
        save_checkpoint(out / "model.ckpt", state, cfg)
        state.log.write_csv(out / "train_log.csv", out / "epoch_log.csv")
    model.eval()
    return model, state.log


# ---------------------------------------------------------------------------
# inference


def embed_dataset(model: EyeLearnModel, maps: Sequence[ThicknessMap], masks: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One embedding per map (artifact-free masks unless ``masks`` is given)."""
    ids = np.array([m.image_id for m in maps], dtype=np.int64)
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("image id collision in dataset")
    x = maps_to_tensor(maps)
    mk = masks_to_tensor(masks) if masks is not None else None
    return ids, embed_images(model, x, mk).numpy().astype(np.float32)


@torch.no_grad()
def inpaint(model: EyeLearnModel, pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Corrected map in µm: valid pixels pass through, holes take the network output."""
    if pixels.shape != mask.shape:
        raise ValueError("map and mask shapes differ")
    was = model.training
    model.eval()
    try:
        x = maps_to_tensor(pixels[None])
        m = masks_to_tensor(mask[None])
        _, out = model(x * m, m)
    finally:
        model.train(was)
    filled = out[0, 0].double().numpy() * THICKNESS_SCALE
    mb = mask.astype(bool)
    result = np.where(mb, pixels.astype(np.float64), filled)
    return result.astype(pixels.dtype)


EMB_MAGIC = b"EMB1"


def write_embeddings(path: str | Path, ids: np.ndarray, emb: np.ndarray) -> None:
    ids = np.asarray(ids)
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("image id collision in embeddings")
    n, d = emb.shape
    rec = np.zeros(n, dtype=[("id", "<u4"), ("v", "<f4", (d,))])
    rec["id"] = ids
    rec["v"] = emb
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", n, d))
        fh.write(rec.tobytes())


def read_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embeddings file")
    n, d = struct.unpack_from("<II", data, 4)
    dt = np.dtype([("id", "<u4"), ("v", "<f4", (d,))])
    if len(data) - 12 != n * dt.itemsize:
        raise ValueError(f"{path}: expected {n} records of dim {d}")
    rec = np.frombuffer(data, dtype=dt, offset=12)
    return rec["id"].astype(np.int64), rec["v"].astype(np.float32)
