"""Training phases, configuration and checkpoints.

Phases run in order: word-by-word training until the monitored loss stops
improving, triplet pretraining of the meaning head, then mixed training
where each batch is a meaning step with probability
``meaning_phase_probability`` and a word step otherwise.

Two Adam optimizers are kept: ``opt_all`` over every parameter and
``opt_meaning`` over the meaning head only. In a meaning step the similar
term's gradient goes to ``opt_all`` and the dissimilar term's gradient to
``opt_meaning``, so dissimilar pairs never move the captioner.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Batch, Dataset, detection_labels, make_batches
from .embeddings import Vocabulary, build_vocabulary, import_pretrained, read_word_vectors
from .errors import ConfigurationError, FormatError
from .meaning import PAIRINGS, batch_meaning_loss, batch_triplet_loss, loss_sim
from .model import BatchTensors, Captioner, ModelDims, collate

log = logging.getLogger(__name__)

PHASES = ("word", "pretrain", "mixed")
CHECKPOINT_FORMAT = "meaningcap-checkpoint/1"
# fields that fix parameter shapes; a checkpoint refuses configs that differ here
ARCH_FIELDS = ("d_vis", "hidden", "d_emb", "meaning_hidden", "meaning_dim", "max_frames")


@dataclass
class TrainingConfig:
    batch_size: int = 50
    max_frames: int = 80
    hidden: int = 1000
    d_emb: int = 300
    d_vis: int = 2048
    meaning_hidden: int = 1000
    meaning_dim: int = 1000
    vocab_min_count: int = 1
    lr_all: float = 1e-3
    lr_meaning: float = 1e-3
    meaning_phase_probability: float = 0.7
    triplet_margin: float = 1.0
    seed: int = 0
    patience: int = 5
    max_len: int = 30
    max_word_epochs: int = 500
    pretrain_epochs: int = 10
    mixed_steps: int = 1000
    grad_clip: float = 5.0
    pairing: str = "both"
    similar_weight: float = 1.0
    pretrained_vectors: str | None = None

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigurationError(f"batch_size: must be even and >= 2, got {self.batch_size}")
        if not 0.0 <= self.meaning_phase_probability <= 1.0:
            raise ConfigurationError("meaning_phase_probability: must lie in [0, 1]")
        if self.triplet_margin <= 0:
            raise ConfigurationError("triplet_margin: must be positive")
        if self.pairing not in PAIRINGS:
            raise ConfigurationError(f"pairing: must be one of {PAIRINGS}")
        for name in ("max_frames", "hidden", "d_emb", "d_vis", "meaning_hidden", "meaning_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be positive")
        if self.patience < 0:
            raise ConfigurationError("patience: must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigurationError(f"unknown config key {unknown[0]!r}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "TrainingConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ConfigurationError(f"config {path}: expected a JSON object")
        return cls.from_dict(obj)

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)


def config_hash(config: TrainingConfig, vocab: Vocabulary) -> str:
    arch = {k: getattr(config, k) for k in ARCH_FIELDS}
    blob = json.dumps({"arch": arch, "vocab": vocab.id_to_token}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _epoch_seed(seed: int, phase: str, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, PHASES.index(phase), epoch]).generate_state(1)[0])


def _clip(params, max_norm):
    grads = [p for p in params if p.grad is not None]
    if grads and max_norm > 0:
        torch.nn.utils.clip_grad_norm_(grads, max_norm)


@dataclass
class Progress:
    phase: str | None = None
    epoch: int = 0
    batch_index: int = 0
    steps: int = 0
    best_loss: float | None = None
    bad_epochs: int = 0
    finished: list[str] = field(default_factory=list)


class Trainer:
    """Model, both optimizers, the schedule RNG, and phase progress."""

    def __init__(self, config: TrainingConfig, vocab: Vocabulary, embedding: torch.Tensor | None = None):
        self.config = config
        self.vocab = vocab
        dims = ModelDims(
            len(vocab), config.d_vis, config.hidden, config.d_emb, config.meaning_hidden, config.meaning_dim
        )
        self.model = Captioner(dims, embedding, seed=config.seed)
        self.opt_all = torch.optim.Adam(self.model.parameters(), lr=config.lr_all)
        self.opt_meaning = torch.optim.Adam(self.model.meaning_parameters(), lr=config.lr_meaning)
        self.rng = np.random.default_rng(config.seed)
        self.progress = Progress()
        self.best_state: dict[str, torch.Tensor] | None = None
        self.history: list[dict] = []

    # ------------------------------------------------------------ steps

    def tensors(self, data: Dataset, batch: Batch) -> BatchTensors:
        return collate([data.packs[v] for v in batch.video_ids], self.vocab, batch.captions)

    def word_step(self, bt: BatchTensors) -> float:
        self.model.train()
        self.opt_all.zero_grad(set_to_none=True)
        loss = self.model.word_loss(bt)
        loss.backward()
        _clip(self.model.parameters(), self.config.grad_clip)
        self.opt_all.step()
        return loss.item()

    def meaning_step(self, bt: BatchTensors) -> dict:
        cfg = self.config
        model = self.model
        model.train()
        enc = model.encode(bt)
        gen = model.generate_soft(enc, cfg.max_len)
        v_gen = model.embed_generated(gen)
        v_gt = model.embed_references(bt)
        ml = batch_meaning_loss(v_gen, v_gt, bt.video_ids, cfg.pairing)

        all_params = list(model.parameters())
        head = model.meaning_parameters()
        sim_grads = None
        if cfg.similar_weight != 0:
            sim_grads = torch.autograd.grad(
                cfg.similar_weight * ml.similar, all_params, retain_graph=True, allow_unused=True
            )
        dis_grads = torch.autograd.grad(ml.dissimilar, head, allow_unused=True)

        if sim_grads is not None:
            self.opt_all.zero_grad(set_to_none=True)
            for p, g in zip(all_params, sim_grads):
                p.grad = g
            _clip(all_params, cfg.grad_clip)
            self.opt_all.step()
            self.opt_all.zero_grad(set_to_none=True)
        self.opt_meaning.zero_grad(set_to_none=True)
        for p, g in zip(head, dis_grads):
            p.grad = g
        _clip(head, cfg.grad_clip)
        self.opt_meaning.step()
        self.opt_meaning.zero_grad(set_to_none=True)
        return {"similar": ml.similar.item(), "dissimilar": ml.dissimilar.item()}

    def triplet_step(self, bt: BatchTensors) -> float:
        """Anchors are generated captions, positives their references, negatives
        the other references in the batch. Only the meaning head moves."""
        model = self.model
        model.train()
        with torch.no_grad():
            enc = model.encode(bt)
            gen = model.generate_soft(enc, self.config.max_len)
            E = model.embedding.detach()
        v_gen = model.meaning(gen.soft, gen.lengths)
        v_gt = model.embed_references(bt, embedding=E)
        loss = batch_triplet_loss(v_gen, v_gt, self.config.triplet_margin)
        self.opt_meaning.zero_grad(set_to_none=True)
        loss.backward()
        _clip(model.meaning_parameters(), self.config.grad_clip)
        self.opt_meaning.step()
        self.opt_meaning.zero_grad(set_to_none=True)
        return loss.item()

    # ------------------------------------------------------------ measurements

    def _caption_pairs(self, data: Dataset, split: str):
        vids = data.videos(split)
        pairs = [(v, c) for v in vids for c in data.manifest[v].captions]
        step = max(self.config.batch_size, 2)
        for i in range(0, len(pairs), step):
            chunk = pairs[i : i + step]
            yield collate([data.packs[v] for v, _ in chunk], self.vocab, [c for _, c in chunk])

    @torch.no_grad()
    def word_loss_on(self, data: Dataset, split: str) -> float:
        self.model.eval()
        total, n = 0.0, 0
        for bt in self._caption_pairs(data, split):
            total += self.model.word_loss(bt, reduction="none").sum().item()
            n += len(bt)
        if n == 0:
            raise ConfigurationError(f"split {split!r} is empty")
        return total / n

    @torch.no_grad()
    def similar_term_on(self, data: Dataset, split: str) -> float:
        """Mean similar-pair loss between generated and reference captions."""
        self.model.eval()
        total, n = 0.0, 0
        for bt in self._caption_pairs(data, split):
            enc = self.model.encode(bt)
            gen = self.model.generate_soft(enc, self.config.max_len)
            sims = loss_sim(self.model.embed_generated(gen), self.model.embed_references(bt))
            total += sims.sum().item()
            n += len(bt)
        return total / n

    @torch.no_grad()
    def caption(self, data: Dataset, split: str) -> dict[str, list[int]]:
        """Greedy token ids (EOS included when emitted) for every video in ``split``."""
        self.model.eval()
        vids = data.videos(split)
        out = {}
        step = max(self.config.batch_size, 2)
        for i in range(0, len(vids), step):
            chunk = vids[i : i + step]
            bt = collate([data.packs[v] for v in chunk], self.vocab)
            for v, ids in zip(chunk, self.model.generate_greedy(self.model.encode(bt), self.config.max_len)):
                out[v] = ids
        return out

    # ------------------------------------------------------------ phases

    def _enter(self, phase: str) -> bool:
        """Switch progress to ``phase``; False when it already finished."""
        pr = self.progress
        if pr.phase != phase:
            self.progress = Progress(phase=phase, finished=pr.finished)
            self.best_state = None
        return phase not in self.progress.finished

    def _check_data(self, data: Dataset) -> None:
        if not data.videos("train"):
            raise ConfigurationError("dataset has no training videos")
        if data.d_vis != self.config.d_vis:
            raise ConfigurationError(f"d_vis: config says {self.config.d_vis}, feature packs have {data.d_vis}")

    def _snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def train_word_phase(self, data: Dataset, max_steps: int | None = None) -> "Trainer":
        """Teacher-forced training until the monitored loss stalls for ``patience`` epochs.

        The validation split is monitored when it is non-empty, otherwise the
        training split. The best-scoring parameters are restored at the end.
        ``max_steps`` interrupts the run (for checkpoint/resume); calling
        again continues where it stopped.
        """
        self._check_data(data)
        if not self._enter("word"):
            return self
        cfg, pr = self.config, self.progress
        monitor = "val" if data.videos("val") else "train"
        taken = 0
        while pr.epoch < cfg.max_word_epochs:
            batches = make_batches(data.manifest, cfg.batch_size, _epoch_seed(cfg.seed, "word", pr.epoch))
            while pr.batch_index < len(batches):
                if max_steps is not None and taken >= max_steps:
                    return self
                loss = self.word_step(self.tensors(data, batches[pr.batch_index]))
                self.history.append({"phase": "word", "step": pr.steps, "kind": "word", "loss": loss})
                pr.batch_index += 1
                pr.steps += 1
                taken += 1
            pr.batch_index = 0
            pr.epoch += 1
            score = self.word_loss_on(data, monitor)
            self.history.append({"phase": "word", "epoch": pr.epoch, "monitor": monitor, "loss": score})
            if pr.best_loss is None or score < pr.best_loss:
                pr.best_loss, pr.bad_epochs = score, 0
                self.best_state = self._snapshot()
            else:
                pr.bad_epochs += 1
                if pr.bad_epochs > cfg.patience:
                    break
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        log.info("word phase done after %d epochs, best %s loss %.4f", pr.epoch, monitor, pr.best_loss)
        pr.finished.append("word")
        return self

    def pretrain_meaning(self, data: Dataset, max_steps: int | None = None) -> "Trainer":
        self._check_data(data)
        if not self._enter("pretrain"):
            return self
        cfg, pr = self.config, self.progress
        taken = 0
        while pr.epoch < cfg.pretrain_epochs:
            batches = make_batches(data.manifest, cfg.batch_size, _epoch_seed(cfg.seed, "pretrain", pr.epoch))
            while pr.batch_index < len(batches):
                if max_steps is not None and taken >= max_steps:
                    return self
                loss = self.triplet_step(self.tensors(data, batches[pr.batch_index]))
                self.history.append({"phase": "pretrain", "step": pr.steps, "kind": "triplet", "loss": loss})
                pr.batch_index += 1
                pr.steps += 1
                taken += 1
            pr.batch_index = 0
            pr.epoch += 1
        pr.finished.append("pretrain")
        return self

    def train_mixed_phase(self, data: Dataset, steps: int | None = None, max_steps: int | None = None) -> "Trainer":
        """Run ``steps`` batches (default ``config.mixed_steps``) of 70/30 mixed training."""
        self._check_data(data)
        if not self._enter("mixed"):
            return self
        cfg, pr = self.config, self.progress
        steps = cfg.mixed_steps if steps is None else steps
        taken = 0
        while pr.steps < steps:
            batches = make_batches(data.manifest, cfg.batch_size, _epoch_seed(cfg.seed, "mixed", pr.epoch))
            while pr.batch_index < len(batches) and pr.steps < steps:
                if max_steps is not None and taken >= max_steps:
                    return self
                bt = self.tensors(data, batches[pr.batch_index])
                if self.rng.random() < cfg.meaning_phase_probability:
                    rec = {"kind": "meaning", **self.meaning_step(bt)}
                else:
                    rec = {"kind": "word", "loss": self.word_step(bt)}
                self.history.append({"phase": "mixed", "step": pr.steps, **rec})
                pr.batch_index += 1
                pr.steps += 1
                taken += 1
            if pr.batch_index >= len(batches):
                pr.batch_index = 0
                pr.epoch += 1
        pr.finished.append("mixed")
        return self


# ---------------------------------------------------------------- construction


def build_trainer(config: TrainingConfig, data: Dataset, vocab: Vocabulary | None = None) -> Trainer:
    """Trainer with a vocabulary from ``vocab.json`` (or built from the train split)."""
    if vocab is None:
        vocab_path = data.root / "vocab.json"
        if vocab_path.exists():
            vocab = Vocabulary.load(vocab_path)
        else:
            vocab = prepare_vocabulary(data, config.vocab_min_count)
    embedding = None
    if config.pretrained_vectors:
        vectors = read_word_vectors(config.pretrained_vectors, config.d_emb, keep=set(vocab.id_to_token))
        embedding = import_pretrained(vocab, vectors, config.d_emb, seed=config.seed)
    return Trainer(config, vocab, embedding)


def prepare_vocabulary(data: Dataset, min_count: int = 1) -> Vocabulary:
    train = data.videos("train")
    return build_vocabulary(
        data.manifest.caption_records("train"),
        min_count,
        extra_tokens=detection_labels(data.packs[v] for v in train),
    )


def train_word_phase(config: TrainingConfig, data: Dataset, trainer: Trainer | None = None) -> Trainer:
    trainer = build_trainer(config, data) if trainer is None else trainer
    return trainer.train_word_phase(data)


def pretrain_meaning(config: TrainingConfig, data: Dataset, trainer: Trainer) -> Trainer:
    return trainer.pretrain_meaning(data)


def train_mixed_phase(config: TrainingConfig, data: Dataset, trainer: Trainer) -> Trainer:
    return trainer.train_mixed_phase(data)


# ---------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def _optimizer_tensors(opt: torch.optim.Optimizer, names: dict[int, str], prefix: str):
    for group in opt.param_groups:
        for p in group["params"]:
            for key, value in opt.state.get(p, {}).items():
                yield f"{prefix}/{names[id(p)]}/{key}", value


def save_checkpoint(trainer: Trainer, path: str | Path) -> Path:
    """Write one zip archive: ``metadata.json`` plus raw little-endian ``tensors.bin``."""
    path = Path(path)
    names = {id(p): n for n, p in trainer.model.named_parameters()}
    tensors = [(f"param/{n}", p.detach()) for n, p in trainer.model.named_parameters()]
    if trainer.best_state is not None:
        tensors += [(f"best/{n}", t) for n, t in trainer.best_state.items()]
    tensors += list(_optimizer_tensors(trainer.opt_all, names, "adam_all"))
    tensors += list(_optimizer_tensors(trainer.opt_meaning, names, "adam_meaning"))

    blob = io.BytesIO()
    index = []
    for name, t in tensors:
        if t.dtype not in _DTYPES:
            raise TypeError(f"cannot serialize {name} of dtype {t.dtype}")
        raw = t.contiguous().numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype], "offset": blob.tell(), "nbytes": len(raw)})
        blob.write(raw)

    pr = trainer.progress
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": trainer.config.to_dict(),
        "config_hash": config_hash(trainer.config, trainer.vocab),
        "vocab": trainer.vocab.id_to_token,
        "progress": dataclasses.asdict(pr),
        "rng": trainer.rng.bit_generator.state,
        "history": trainer.history,
        "tensors": index,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, data in (("metadata.json", json.dumps(meta, sort_keys=True).encode()), ("tensors.bin", blob.getvalue())):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return path


def load_checkpoint(path: str | Path, config: TrainingConfig | None = None) -> Trainer:
    """Restore a trainer bit-exactly.

    When ``config`` is given its architecture fields must hash to the stored
    value; otherwise the stored config is used. Non-architecture fields of a
    given config (learning rates, schedule) take effect on the restored trainer.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("metadata.json"))
            blob = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unknown checkpoint format {meta.get('format')!r}")

    vocab = Vocabulary(meta["vocab"])
    stored = TrainingConfig.from_dict(meta["config"])
    if config is None:
        config = stored
    elif config_hash(config, vocab) != meta["config_hash"]:
        diff = [k for k in ARCH_FIELDS if getattr(config, k) != getattr(stored, k)]
        raise ConfigurationError(f"{path}: config does not match checkpoint (differs in {diff or 'vocabulary'})")
    if config_hash(stored, vocab) != meta["config_hash"]:
        raise FormatError(f"{path}: stored config hash mismatch")

    tensors = {}
    for entry in meta["tensors"]:
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise FormatError(f"{path}: tensor {entry['name']} truncated")
        arr = np.frombuffer(blob[start:end], dtype=entry["dtype"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())

    trainer = Trainer(config, vocab)
    params = dict(trainer.model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = f"param/{name}"
            if key not in tensors:
                raise FormatError(f"{path}: missing tensor {key}")
            p.copy_(tensors[key])
    best = {k[len("best/"):]: v for k, v in tensors.items() if k.startswith("best/")}
    trainer.best_state = best or None
    for prefix, opt in (("adam_all", trainer.opt_all), ("adam_meaning", trainer.opt_meaning)):
        for name, p in params.items():
            state = {k.rsplit("/", 1)[1]: v for k, v in tensors.items() if k.rsplit("/", 1)[0] == f"{prefix}/{name}"}
            if state:
                opt.state[p] = state
    trainer.rng.bit_generator.state = meta["rng"]
    trainer.progress = Progress(**meta["progress"])
    trainer.history = meta["history"]
    return trainer

