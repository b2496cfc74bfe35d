import json

import numpy as np
import pytest
import torch

from eyelearn import trainer as tr
from eyelearn.bank import MemoryBank
from eyelearn.dataio import SyntheticParams, generate_artifact_mask, generate_mask_pool, generate_synthetic_dataset
from eyelearn.losses import ContrastConfig
from eyelearn.network import ArchConfig
from eyelearn.trainer import TrainConfig, TrainingDivergedError, train

ARCH = ArchConfig(input_size=16, encoder_depth=2, channels=(8, 16), kernels=(3, 3), projection_dims=(16, 16, 8), extractor_channels=(4, 8))


@pytest.fixture(scope="module")
def data():
    maps, man = generate_synthetic_dataset(SyntheticParams(n_maps=24, width=16, height=16, seed=5))
    pool = generate_mask_pool(20, 16, 16, (0.1, 0.4), seed=2)
    return maps, man, pool


def _cfg(**kw):
    base = dict(epochs=2, batch_size=4, n_clusters=3, bank_capacity=12, contrast=ContrastConfig(n_negatives=3), checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_same_seeds_same_loss_stream(data):
    maps, _, pool = data
    _, a = train(maps, pool, _cfg(), ARCH)
    _, b = train(maps, pool, _cfg(), ARCH)
    assert np.max(np.abs(a.losses() - b.losses())) <= 1e-9
    assert len(a.batches) == 2 * (24 // 4)


def test_different_seed_changes_stream(data):
    maps, _, pool = data
    _, a = train(maps, pool, _cfg(epochs=1), ARCH)
    _, b = train(maps, pool, _cfg(epochs=1, data_seed=1), ARCH)
    assert not np.array_equal(a.losses(), b.losses())


def test_first_epoch_has_no_inter_loss(data):
    maps, _, pool = data
    _, log = train(maps, pool, _cfg(), ARCH)
    first = [b for b in log.batches if b["epoch"] == 1]
    assert all(b["inter"] == 0.0 and b["inter_skipped"] == 4 for b in first)
    assert any(b["inter"] > 0 for b in log.batches if b["epoch"] == 2)
    assert log.epochs[0]["label_change"] == 1.0


def test_bank_never_exceeds_capacity(data, monkeypatch):
    maps, _, pool = data
    sizes = []
    push = MemoryBank.push

    def spy(self, *args, **kw):
        push(self, *args, **kw)
        sizes.append((len(self), self.capacity))

    monkeypatch.setattr(MemoryBank, "push", spy)
    train(maps, pool, _cfg(bank_capacity=7, contrast=ContrastConfig(n_negatives=2)), ARCH)
    assert sizes and all(n <= cap for n, cap in sizes)
    assert max(n for n, _ in sizes) == 7


def test_recon_only_leaves_head_untouched(data):
    maps, _, pool = data
    init = tr.build_state(ARCH, _cfg()).model
    model, log = train(maps, pool, _cfg(ablation="recon_only", epochs=1), ARCH)
    for p, q in zip(init.head.parameters(), model.head.parameters()):
        assert torch.equal(p, q)
    enc_changed = any(not torch.equal(p, q) for p, q in zip(init.encoder.parameters(), model.encoder.parameters()))
    assert enc_changed
    assert all(b["intra"] == 0 and b["inter"] == 0 for b in log.batches)


@pytest.mark.parametrize("mode", ["full", "recon_only", "intra_only", "inter_only"])
def test_ablation_modes_run(data, mode):
    maps, _, pool = data
    _, log = train(maps, pool, _cfg(ablation=mode), ARCH)
    intra = log.losses("intra")
    inter = log.losses("inter")
    assert np.all(np.isfinite(log.losses()))
    assert (intra.max() > 0) == (mode in ("full", "intra_only"))
    assert (inter.max() > 0) == (mode in ("full", "inter_only"))


def test_effective_weights():
    assert _cfg(ablation="intra_only").effective_weights == (0.002, 0.0)
    assert _cfg(ablation="inter_only").effective_weights == (0.0, 0.001)
    with pytest.raises(ValueError):
        _cfg(ablation="nope").validate()
    with pytest.raises(ValueError):
        _cfg(bank_capacity=3).validate()


def test_resume_matches_uninterrupted(data, tmp_path):
    maps, _, pool = data
    _, full = train(maps, pool, _cfg(epochs=3), ARCH, out_dir=tmp_path / "full")
    train(maps, pool, _cfg(epochs=3), ARCH, out_dir=tmp_path / "part", stop_after=1)
    _, resumed = train(maps, pool, _cfg(epochs=3), ARCH, out_dir=tmp_path / "resumed", resume=tmp_path / "part" / "checkpoint_epoch001.ckpt")
    assert len(resumed.batches) == len(full.batches)
    assert np.max(np.abs(full.losses() - resumed.losses())) <= 1e-9
    for key in ("intra", "inter", "recon"):
        assert np.max(np.abs(full.losses(key) - resumed.losses(key))) <= 1e-9
    a = (tmp_path / "full" / "model.ckpt").read_bytes()
    b = (tmp_path / "resumed" / "model.ckpt").read_bytes()
    assert a == b


def test_outputs_written(data, tmp_path):
    maps, _, pool = data
    train(maps, pool, _cfg(epochs=1), ARCH, out_dir=tmp_path)
    for name in ("model.ckpt", "checkpoint_epoch001.ckpt", "train_log.csv", "epoch_log.csv"):
        assert (tmp_path / name).exists()
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0].split(",")
    assert header == list(tr.TrainLog.BATCH_FIELDS)


def test_divergence_aborts_with_snapshot(data, tmp_path, monkeypatch):
    maps, _, pool = data

    def bad(gt, out, mask, weights, extractor):
        nan = out.sum() * float("nan")
        return nan, {"valid": nan}

    monkeypatch.setattr(tr, "recon_loss", bad)
    with pytest.raises(TrainingDivergedError):
        train(maps, pool, _cfg(epochs=1), ARCH, out_dir=tmp_path)
    snap = json.loads((tmp_path / "diverged.json").read_text())
    assert snap["epoch"] == 1 and snap["batch"] == 0 and len(snap["ids"]) == 4


def test_input_validation(data):
    maps, _, pool = data
    with pytest.raises(ValueError):
        train(maps, pool, _cfg(), ArchConfig(input_size=32, encoder_depth=2, channels=(8, 16), kernels=(3, 3)))
    with pytest.raises(ValueError):
        train(maps[:2], pool, _cfg(), ARCH)
    with pytest.raises(ValueError):
        train(maps, pool[:, :8, :8], _cfg(), ARCH)


def test_views_with_artifacts(data):
    maps, _, pool = data
    _, log = train(maps, pool, _cfg(epochs=1, view_artifacts=True), ARCH)
    assert np.all(np.isfinite(log.losses()))


@pytest.fixture(scope="module")
def trained(data):
    maps, _, pool = data
    model, _ = train(maps, pool, _cfg(epochs=1), ARCH)
    return model


def test_inpaint_passes_valid_pixels_through(data, trained):
    maps, _, _ = data
    mask = generate_artifact_mask(16, 16, 0.3, seed=4)
    fixed = tr.inpaint(trained, maps[0].pixels, mask)
    assert np.array_equal(fixed[mask == 1], maps[0].pixels[mask == 1])
    assert np.all(np.isfinite(fixed))
    full = tr.inpaint(trained, maps[0].pixels, np.ones((16, 16), np.uint8))
    assert np.array_equal(full, maps[0].pixels)


def test_embed_dataset_rows(data, trained):
    maps, _, _ = data
    ids, emb = tr.embed_dataset(trained, maps)
    assert emb.shape == (24, ARCH.embedding_dim)
    assert ids.tolist() == [m.image_id for m in maps]
    # embedding a subset does not depend on the rest of the batch
    _, sub = tr.embed_dataset(trained, maps[3:5])
    assert np.allclose(sub, emb[3:5], atol=1e-6)


def test_embeddings_round_trip(tmp_path):
    ids = np.array([5, 9, 2])
    emb = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    tr.write_embeddings(tmp_path / "e.emb", ids, emb)
    ids2, emb2 = tr.read_embeddings(tmp_path / "e.emb")
    assert ids2.tolist() == [5, 9, 2] and np.array_equal(emb, emb2)
    data = (tmp_path / "e.emb").read_bytes()
    (tmp_path / "t.emb").write_bytes(data[:-2])
    with pytest.raises(ValueError):
        tr.read_embeddings(tmp_path / "t.emb")
    with pytest.raises(ValueError):
        tr.write_embeddings(tmp_path / "d.emb", np.array([1, 1, 2]), emb)


def test_checkpoint_restores_model(data, trained, tmp_path):
    state = tr.build_state(ARCH, _cfg())
    state.model.load_state_dict(trained.state_dict())
    tr.save_checkpoint(tmp_path / "m.ckpt", state, _cfg())
    model = tr.load_model(tmp_path / "m.ckpt")
    _, a = tr.embed_dataset(trained, data[0])
    _, b = tr.embed_dataset(model, data[0])
    assert np.array_equal(a, b)
