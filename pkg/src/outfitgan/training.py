"""Three-phase adversarial training loop and checkpoints.

Each iteration updates, in order, the real/fake discriminator, the
collocation discriminator, and then the style extractor and generator jointly.
Everything random in an iteration (batch indices, given masks, negatives) is
drawn from a numpy stream seeded by ``(seed, iteration)``, so a resumed run
replays exactly the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np
import torch

from .config import config_hash
from .data import DatasetSplit, OutfitRecord, sample_given_masks, stack_batch
from .discriminators import (
    CollocationDiscriminator,
    UNetDiscriminator,
    collocation_dis_loss,
    collocation_g_loss,
    dis_loss,
    gan_loss_g,
    negative_batch,
)
from .extractor import PyramidStyleExtractor
from .generator import OutfitGenerator, syn_outfit
from .layers import set_requires_grad
from .losses import LossWeights, build_taps, l1_loss, perceptual_loss, r1_due, r1_penalty, total_g_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "L_dis", "L_coll_dis", "L_gan", "L1", "Lvgg", "Lcoll", "Lg")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration, losses, checkpoint=None):
        self.iteration = iteration
        self.losses = losses
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at iteration {iteration}: {losses} (diagnostic checkpoint: {checkpoint})")


class CheckpointError(RuntimeError):
    pass


class LeakError(AssertionError):
    """A given item was not passed through the compositing step bit-exactly."""


@dataclass
class TrainConfig:
    batch_size: int = 4
    n_iter: int = 120_000
    lr: float = 0.002
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    lambda1: float = 100.0
    lambda2: float = 10.0
    lambda3: float = 10.0
    r1_every: int = 16
    r1_gamma: float = 10.0
    seed: int = 0
    ckpt_every: int = 1000
    leak_check_every: int = 100

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "TrainConfig":
        return cls(**{f: cfg[f"train.{f}"] for f in cls.__dataclass_fields__})


def build_models(cfg: Mapping[str, Any], dtype=torch.float32) -> dict[str, torch.nn.Module]:
    """Instantiate E, G, D and D_coll from a flat config; init is seeded by ``train.seed``."""
    torch.manual_seed(cfg["train.seed"])
    res = cfg["data.resolution"]
    n = cfg["data.n_categories"]
    models = {
        "E": PyramidStyleExtractor(
            res,
            n_items=n,
            channels=tuple(cfg["extractor.channels"]),
            d_v=cfg["extractor.d_v"],
            d_cat=cfg["extractor.d_cat"],
            hidden=cfg["extractor.hidden"],
            mlp_layers=cfg["extractor.mlp_layers"],
            mlp_width=cfg["extractor.mlp_width"],
            style_dim=cfg["extractor.style_dim"],
            n_scales=cfg["extractor.n_scales"],
        ),
        "G": OutfitGenerator(
            res,
            style_dim=cfg["extractor.style_dim"],
            base_channels=cfg["generator.base_channels"],
            max_channels=cfg["generator.max_channels"],
        ),
        "D": UNetDiscriminator(
            res, channels=cfg["dis.channels"], max_channels=cfg["dis.max_channels"], logit_clamp=cfg["dis.logit_clamp"]
        ),
        "D_coll": CollocationDiscriminator(
            res,
            n_categories=n,
            channels=cfg["collocation.channels"],
            feature_dim=cfg["collocation.feature_dim"],
            embed_dim=cfg["collocation.embed_dim"],
        ),
    }
    return {k: m.to(dtype) for k, m in models.items()}


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, 0x0E7F17])


def state_digest(models: Mapping[str, torch.nn.Module]) -> str:
    h = hashlib.sha256()
    for name in sorted(models):
        for key, tensor in sorted(models[name].state_dict().items()):
            h.update(f"{name}.{key}".encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    def __init__(self, cfg: Mapping[str, Any], data: DatasetSplit | list[OutfitRecord], out_dir: str | Path | None = None):
        self.cfg = dict(cfg)
        self.tc = TrainConfig.from_config(cfg)
        self.records = data.train if isinstance(data, DatasetSplit) else list(data)
        if len(self.records) < max(2, self.tc.batch_size):
            raise ValueError("need at least batch_size (>= 2) training outfits")
        self.images, self.sils = (torch.from_numpy(a) for a in stack_batch(self.records))
        self.categories = torch.tensor([r.categories for r in self.records])
        self.n_items = self.images.shape[1]
        self.models = build_models(cfg)
        self.taps = build_taps(cfg["loss.perceptual_backend"], tuple(cfg["loss.perceptual_channels"]))
        self.weights = LossWeights(self.tc.lambda1, self.tc.lambda2, self.tc.lambda3)
        self.margin = cfg["collocation.margin"]
        betas = (self.tc.adam_beta1, self.tc.adam_beta2)
        self.opt = {
            "D": torch.optim.Adam(self.models["D"].parameters(), lr=self.tc.lr, betas=betas),
            "D_coll": torch.optim.Adam(self.models["D_coll"].parameters(), lr=self.tc.lr, betas=betas),
            "EG": torch.optim.Adam(
                [*self.models["E"].parameters(), *self.models["G"].parameters()], lr=self.tc.lr, betas=betas
            ),
        }
        self.iteration = 0
        self.history: list[dict[str, float]] = []
        self.config_hash = config_hash(self.cfg)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.phase_hook = None  # called as hook(phase_name, trainer) after each phase

    # -- batches -----------------------------------------------------------

    def batch(self, iteration: int):
        rng = iteration_rng(self.tc.seed, iteration)
        idx = torch.as_tensor(rng.choice(len(self.records), size=self.tc.batch_size, replace=False))
        given = torch.as_tensor(sample_given_masks(rng, self.tc.batch_size, self.n_items))
        return self.images[idx], self.sils[idx], given, self.categories[idx], rng

    # -- one iteration -----------------------------------------------------

    def step(self) -> dict[str, float]:
        it = self.iteration + 1
        E, G, D, Dc = (self.models[k] for k in ("E", "G", "D", "D_coll"))
        reals, sils, given, cats, rng = self.batch(it)
        target = ~given.bool()

        # E and G are untouched until phase 3, so one synthesis pass serves all phases.
        set_requires_grad([E, G], True)
        set_requires_grad([D, Dc], False)
        composited, raw = syn_outfit(reals, sils, given, E, G, cats)
        fakes = raw[target]

        # phase 1: real/fake discriminator
        set_requires_grad([D], True)
        self.opt["D"].zero_grad(set_to_none=True)
        flat_reals = reals.flatten(0, 1)
        l_dis = dis_loss(D(flat_reals), D(fakes.detach()))
        loss_d = l_dis
        if r1_due(it, self.tc.r1_every):
            loss_d = loss_d + r1_penalty(lambda x: D(x, clamp=False)[0], flat_reals, self.tc.r1_gamma)
        loss_d.backward()
        self.opt["D"].step()
        set_requires_grad([D], False)
        self._hook("D")

        # phase 2: collocation discriminator on real positives and shuffled negatives
        set_requires_grad([Dc], True)
        self.opt["D_coll"].zero_grad(set_to_none=True)
        pos = Dc(reals, cats)
        neg = negative_batch(pos, rng)
        l_coll_dis = collocation_dis_loss(pos, pos.roll(1, dims=0), neg, self.margin)
        l_coll_dis.backward()
        self.opt["D_coll"].step()
        set_requires_grad([Dc], False)
        self._hook("D_coll")

        # phase 3: extractor + generator
        self.opt["EG"].zero_grad(set_to_none=True)
        l_gan = gan_loss_g(D(fakes))
        l1 = l1_loss(reals, composited)
        lvgg = perceptual_loss(reals, composited, self.taps)
        mixed = Dc(composited, cats)
        l_coll = collocation_g_loss(mixed, negative_batch(mixed, rng), self.margin)
        l_g = total_g_loss(l_gan, l1, lvgg, l_coll, self.weights)
        l_g.backward()
        self.opt["EG"].step()
        self._hook("EG")

        self.iteration = it
        row = {
            "iter": it,
            "L_dis": l_dis.item(),
            "L_coll_dis": l_coll_dis.item(),
            "L_gan": l_gan.item(),
            "L1": l1.item(),
            "Lvgg": float(lvgg.item()),
            "Lcoll": l_coll.item(),
            "Lg": l_g.item(),
        }
        if self.tc.leak_check_every and it % self.tc.leak_check_every == 0:
            keep = given.bool()
            if not torch.equal(composited.detach()[keep], reals[keep]):
                raise LeakError(f"given items altered by compositing at iteration {it}")
        bad = {k: v for k, v in row.items() if not math.isfinite(v)}
        if bad:
            ckpt = self.save(tag=f"nonfinite_{it}") if self.out_dir else None
            raise NonFiniteLossError(it, bad, ckpt)
        self.history.append(row)
        return row

    def _hook(self, phase):
        if self.phase_hook is not None:
            self.phase_hook(phase, self)

    def run(self, n_iter: int | None = None) -> Iterator[dict[str, float]]:
        """Train until ``n_iter`` total iterations, yielding each log row."""
        n_iter = self.tc.n_iter if n_iter is None else n_iter
        log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "train_log.csv"
            fresh = not path.exists()
            log_file = path.open("a")
            if fresh:
                log_file.write(",".join(LOG_COLUMNS) + "\n")
        try:
            while self.iteration < n_iter:
                row = self.step()
                if log_file is not None:
                    log_file.write(",".join(repr(row[c]) for c in LOG_COLUMNS) + "\n")
                    log_file.flush()
                if self.iteration % 100 == 0:
                    log.info("iter %d  " + "  ".join(f"{c}=%.4f" for c in LOG_COLUMNS[1:]), self.iteration,
                             *(row[c] for c in LOG_COLUMNS[1:]))
                if self.out_dir is not None and self.tc.ckpt_every and self.iteration % self.tc.ckpt_every == 0:
                    self.save()
                yield row
            # always leave a checkpoint for the final iteration
            if self.out_dir is not None and not (self.tc.ckpt_every and self.iteration % self.tc.ckpt_every == 0):
                self.save()
        finally:
            if log_file is not None:
                log_file.close()

    # -- checkpoints -------------------------------------------------------

    def state(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "models": {k: m.state_dict() for k, m in self.models.items()},
            "optimizers": {k: o.state_dict() for k, o in self.opt.items()},
            "torch_rng": torch.get_rng_state(),
            "config": self.cfg,
            "config_hash": self.config_hash,
            "history": self.history,
        }

    def load_state(self, state: Mapping[str, Any], force: bool = False) -> None:
        if state["config_hash"] != self.config_hash and not force:
            raise CheckpointError("checkpoint config hash differs from the current config (use force to override)")
        for k, m in self.models.items():
            m.load_state_dict(state["models"][k])
        for k, o in self.opt.items():
            o.load_state_dict(state["optimizers"][k])
        torch.set_rng_state(state["torch_rng"])
        self.iteration = int(state["iteration"])
        self.history = list(state.get("history", []))

    def save(self, root: str | Path | None = None, tag: str | None = None) -> Path:
        root = Path(root) if root is not None else self.out_dir / "ckpt"
        return save_checkpoint(self.state(), root, tag or str(self.iteration), self.models)

    def resume(self, path: str | Path, force: bool = False) -> None:
        self.load_state(load_checkpoint(path), force=force)


def save_checkpoint(state: Mapping[str, Any], root: str | Path, tag: str, models=None) -> Path:
    """Write ``root/<tag>/{state.pt, manifest.json}`` atomically (temp dir + rename)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(dict(state), buf)
    blob = buf.getvalue()
    manifest = {
        "iteration": int(state["iteration"]),
        "config_hash": state["config_hash"],
        "state_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if models is not None:
        manifest["parameter_digest"] = state_digest(models)
    tmp = Path(tempfile.mkdtemp(prefix=f".{tag}.", dir=root))
    (tmp / "state.pt").write_bytes(blob)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    final = root / tag
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    return final


def read_manifest(path: str | Path) -> dict[str, Any]:
    return json.loads((Path(path) / "manifest.json").read_text())


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    """Load and verify a checkpoint directory; raises :class:`CheckpointError` on any damage."""
    path = Path(path)
    try:
        manifest = read_manifest(path)
        blob = (path / "state.pt").read_bytes()
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint at {path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest.get("state_sha256"):
        raise CheckpointError(f"checkpoint {path} is corrupt (checksum mismatch)")
    try:
        state = torch.load(io.BytesIO(blob), weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} failed to deserialize: {exc}") from exc
    if state.get("config_hash") != manifest.get("config_hash"):
        raise CheckpointError(f"checkpoint {path} manifest does not match its state")
    return state


def models_from_checkpoint(path: str | Path) -> tuple[dict[str, torch.nn.Module], dict[str, Any]]:
    state = load_checkpoint(path)
    models = build_models(state["config"])
    for k, m in models.items():
        m.load_state_dict(state["models"][k])
        m.eval()
    return models, state


def train(cfg: Mapping[str, Any], data: DatasetSplit, out_dir=None, resume=None, force=False):
    """Run (or resume) a full training, yielding one log row per iteration."""
    trainer = Trainer(cfg, data, out_dir)
    if resume is not None:
        trainer.resume(resume, force=force)
    yield from trainer.run()
