import json
import zipfile

import pytest
import torch

from meaningcap.data import Dataset, generate_synthetic_dataset, make_batches
from meaningcap.errors import ConfigurationError, FormatError
from meaningcap.meaning import batch_triplet_loss, triplet_loss
from meaningcap.training import (
    TrainingConfig,
    build_trainer,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)

TINY = TrainingConfig(
    batch_size=4,
    d_vis=8,
    hidden=8,
    d_emb=6,
    meaning_hidden=8,
    meaning_dim=8,
    lr_all=1e-2,
    lr_meaning=1e-2,
    max_len=6,
    max_word_epochs=50,
    pretrain_epochs=3,
    mixed_steps=10,
    seed=0,
)


def dataset(tmp_path, n=8, d_vis=8, **kw):
    manifest, packs = generate_synthetic_dataset(n, 4, 0, d_vis=d_vis, frames=(3, 5), **kw)
    return Dataset(tmp_path, manifest, packs)


@pytest.fixture
def tiny_data(tmp_path):
    return dataset(tmp_path)


def snapshot(params):
    return [p.detach().clone() for p in params]


def unchanged(before, params):
    return all(torch.equal(a, b) for a, b in zip(before, params))


class TestConfig:
    def test_defaults(self):
        cfg = TrainingConfig()
        assert (cfg.batch_size, cfg.hidden, cfg.d_emb, cfg.meaning_phase_probability) == (50, 1000, 300, 0.7)
        assert cfg.lr_all == cfg.lr_meaning == 1e-3 and cfg.triplet_margin == 1.0

    @pytest.mark.parametrize("field,value", [("batch_size", 3), ("meaning_phase_probability", 1.5), ("pairing", "x")])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigurationError, match=field):
            TrainingConfig(**{field: value})

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"lr": 0.1}))
        with pytest.raises(ConfigurationError, match="lr"):
            TrainingConfig.load(path)

    def test_round_trip(self):
        assert TrainingConfig.from_dict(TINY.to_dict()) == TINY

    def test_hash_ignores_schedule(self, tiny_data):
        vocab = build_trainer(TINY, tiny_data).vocab
        assert config_hash(TINY, vocab) == config_hash(TINY.replace(lr_all=0.5, seed=3), vocab)
        assert config_hash(TINY, vocab) != config_hash(TINY.replace(hidden=9), vocab)


class TestWordPhase:
    @pytest.mark.parametrize("patience,epochs", [(0, 2), (2, 4)])
    def test_patience(self, tiny_data, patience, epochs):
        # zero learning rate keeps the monitored loss flat: epoch 1 is the best,
        # and training stops once more than `patience` epochs fail to improve
        cfg = TINY.replace(lr_all=0.0, patience=patience)
        trainer = build_trainer(cfg, tiny_data).train_word_phase(tiny_data)
        assert trainer.progress.epoch == epochs

    def test_monitors_val_when_present(self, tmp_path):
        data = dataset(tmp_path, n=10, val_fraction=0.2)
        trainer = build_trainer(TINY.replace(max_word_epochs=2), data).train_word_phase(data)
        monitored = [h["monitor"] for h in trainer.history if "monitor" in h]
        assert monitored == ["val", "val"]

    def test_loss_curve_falls(self, tiny_data):
        trainer = build_trainer(TINY.replace(hidden=16, lr_all=3e-2, max_word_epochs=100, patience=100), tiny_data)
        trainer.train_word_phase(tiny_data)
        epochs = [h["loss"] for h in trainer.history if "epoch" in h]
        assert epochs[-1] < 0.1 * epochs[0]

    def test_same_seed_same_losses(self, tiny_data):
        runs = [build_trainer(TINY.replace(max_word_epochs=3), tiny_data).train_word_phase(tiny_data) for _ in range(2)]
        assert runs[0].history == runs[1].history

    def test_restores_best(self, tiny_data):
        trainer = build_trainer(TINY.replace(max_word_epochs=5), tiny_data).train_word_phase(tiny_data)
        assert trainer.word_loss_on(tiny_data, "train") == pytest.approx(trainer.progress.best_loss, rel=1e-6)

    def test_d_vis_mismatch(self, tiny_data):
        with pytest.raises(ConfigurationError, match="d_vis"):
            build_trainer(TINY.replace(d_vis=9), tiny_data).train_word_phase(tiny_data)


class TestPretrain:
    def test_fifty_video_batch(self, tmp_path):
        data = dataset(tmp_path, n=50, d_vis=4)
        cfg = TINY.replace(batch_size=50, d_vis=4, pretrain_epochs=15)
        trainer = build_trainer(cfg, data)
        model = trainer.model
        before = snapshot(model.captioner_parameters())

        bt = trainer.tensors(data, make_batches(data.manifest, 50, 0)[0])
        with torch.no_grad():
            gen = model.generate_soft(model.encode(bt), cfg.max_len)
            A, P = model.embed_generated(gen), model.embed_references(bt)
        # each anchor is contrasted with the 49 other references
        explicit = sum(triplet_loss(A[i], P[i], [P[j] for j in range(50) if j != i]) for i in range(50)) / 50
        assert batch_triplet_loss(A, P).item() == pytest.approx(explicit.item(), rel=1e-5)

        trainer.pretrain_meaning(data)
        losses = [h["loss"] for h in trainer.history if h["kind"] == "triplet"]
        assert len(losses) == 15
        assert losses[-1] < losses[0]
        assert unchanged(before, model.captioner_parameters())


class TestMixedPhase:
    def test_probability_zero_is_all_word_steps(self, tiny_data):
        trainer = build_trainer(TINY.replace(meaning_phase_probability=0.0), tiny_data)
        trainer.train_mixed_phase(tiny_data)
        kinds = [h["kind"] for h in trainer.history]
        assert kinds == ["word"] * 10

    def test_probability_one_is_all_meaning_steps(self, tiny_data):
        trainer = build_trainer(TINY.replace(meaning_phase_probability=1.0), tiny_data)
        trainer.train_mixed_phase(tiny_data, steps=3)
        assert [h["kind"] for h in trainer.history] == ["meaning"] * 3

    def test_similar_term_reaches_encoder(self, tiny_data):
        trainer = build_trainer(TINY.replace(meaning_phase_probability=1.0), tiny_data)
        model = trainer.model
        enc_before = snapshot(model.encoder.parameters())
        dec_before = snapshot(model.decoder.parameters())
        trainer.train_mixed_phase(tiny_data, steps=1)
        assert not unchanged(enc_before, model.encoder.parameters())
        assert not unchanged(dec_before, model.decoder.parameters())

    def test_dissimilar_only_leaves_captioner(self, tiny_data):
        cfg = TINY.replace(meaning_phase_probability=1.0, similar_weight=0.0)
        trainer = build_trainer(cfg, tiny_data)
        before = snapshot(trainer.model.captioner_parameters())
        head = snapshot(trainer.model.meaning_parameters())
        trainer.train_mixed_phase(tiny_data, steps=3)
        assert unchanged(before, trainer.model.captioner_parameters())
        assert not unchanged(head, trainer.model.meaning_parameters())


class TestCheckpoint:
    def trained(self, data, **kw):
        trainer = build_trainer(TINY.replace(max_word_epochs=2, **kw), data)
        trainer.train_word_phase(data)
        trainer.train_mixed_phase(data, steps=4)
        return trainer

    def test_round_trip_bitwise(self, tiny_data, tmp_path):
        trainer = self.trained(tiny_data)
        path = save_checkpoint(trainer, tmp_path / "a.ckpt")
        loaded = load_checkpoint(path)
        for (n, a), (_, b) in zip(trainer.model.named_parameters(), loaded.model.named_parameters()):
            assert torch.equal(a, b), n
        assert loaded.rng.bit_generator.state == trainer.rng.bit_generator.state
        assert loaded.progress == trainer.progress and loaded.history == trainer.history
        assert save_checkpoint(loaded, tmp_path / "b.ckpt").read_bytes() == path.read_bytes()

    def test_resume_mid_run(self, tiny_data, tmp_path):
        cfg = TINY.replace(max_word_epochs=3, mixed_steps=6)
        straight = build_trainer(cfg, tiny_data)
        straight.train_word_phase(tiny_data).train_mixed_phase(tiny_data)

        first = build_trainer(cfg, tiny_data)
        first.train_word_phase(tiny_data).train_mixed_phase(tiny_data, max_steps=3)
        resumed = load_checkpoint(save_checkpoint(first, tmp_path / "mid.ckpt"))
        resumed.train_mixed_phase(tiny_data)
        assert resumed.history == straight.history
        for a, b in zip(straight.model.parameters(), resumed.model.parameters()):
            assert torch.equal(a, b)

    def test_resume_within_word_epoch(self, tiny_data, tmp_path):
        cfg = TINY.replace(max_word_epochs=2)
        straight = build_trainer(cfg, tiny_data).train_word_phase(tiny_data)
        first = build_trainer(cfg, tiny_data).train_word_phase(tiny_data, max_steps=1)
        resumed = load_checkpoint(save_checkpoint(first, tmp_path / "mid.ckpt")).train_word_phase(tiny_data)
        assert resumed.history == straight.history

    def test_refuses_changed_architecture(self, tiny_data, tmp_path):
        path = save_checkpoint(self.trained(tiny_data), tmp_path / "a.ckpt")
        with pytest.raises(ConfigurationError, match="hidden"):
            load_checkpoint(path, TINY.replace(hidden=16))
        # schedule fields may change
        assert load_checkpoint(path, TINY.replace(lr_all=0.5)).config.lr_all == 0.5

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_tensors(self, tiny_data, tmp_path):
        path = save_checkpoint(self.trained(tiny_data), tmp_path / "a.ckpt")
        with zipfile.ZipFile(path) as zf:
            meta, blob = zf.read("metadata.json"), zf.read("tensors.bin")
        with zipfile.ZipFile(tmp_path / "cut.ckpt", "w") as zf:
            zf.writestr("metadata.json", meta)
            zf.writestr("tensors.bin", blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.ckpt"):
            load_checkpoint(tmp_path / "nope.ckpt")

