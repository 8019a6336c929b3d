"""Alternating adversarial training loop.

Each step first updates the discriminator (generator frozen), then the
generator (discriminator frozen); the perceptual backbone is frozen throughout.
The four ablations toggle the adversarial term and the generator architecture.
"""

import csv
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
from torch.nn.modules.batchnorm import _BatchNorm

from . import checkpoint as ckpt
from . import losses as L
from .backbone import gram
from .discriminator import build_discriminator
from .generator import GeneratorConfig, build_generator
from .losses import LossWeights
from .patches import epoch_batches

ABLATIONS = ("NST", "NST_AD", "NST_HRNET", "NST_AD_HRNET")
ADAM_BETAS = (0.5, 0.999)
DIVERGENCE_LIMIT = 1e6

JOURNAL_FIELDS = ("step", "content", "style", "adversarial", "disc", "total")


class DivergenceError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"divergence at step {step}: generator loss {value}")
        self.step = step


@dataclass
class TrainConfig:
    gen_lr: float = 1e-3
    disc_lr: float = 1e-5
    batch_size: int = 4
    epochs: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: str = "NST_AD_HRNET"
    seed: int = 0
    checkpoint_every: int = 50
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.gen_lr <= 0 or self.disc_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def adversarial(self):
        return self.ablation in ("NST_AD", "NST_AD_HRNET")

    def resolved_generator(self):
        """Generator config with the architecture implied by the ablation.

        The style-transfer-only baselines (NST, NST_AD) use the feed-forward
        residual network without the input-output skip; the HRNET ablations use
        the configured multi-resolution network.
        """
        if self.ablation in ("NST", "NST_AD"):
            return GeneratorConfig(
                arch="residual",
                branch_channels=self.generator.branch_channels,
                residual_blocks=self.generator.residual_blocks,
                use_skip=False,
                final_zero_init=False,
            )
        return GeneratorConfig(**{**asdict(self.generator), "arch": "hrnet"})

    def to_dict(self):
        d = asdict(self)
        d["generator"]["branch_channels"] = list(self.generator.branch_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        if "generator" in d and not isinstance(d["generator"], GeneratorConfig):
            g = dict(d["generator"])
            if "branch_channels" in g:
                g["branch_channels"] = tuple(g["branch_channels"])
            d["generator"] = GeneratorConfig(**g)
        return cls(**d)


def load_config(path):
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


@contextmanager
def frozen(module):
    """Freeze a network for the other player's sub-step.

    Parameters stop receiving gradients and batch-norm layers keep using batch
    statistics without updating their running buffers, so the frozen network's
    state is bit-identical afterwards.
    """
    req = [(p, p.requires_grad) for p in module.parameters()]
    bns = [m for m in module.modules() if isinstance(m, _BatchNorm)]
    tracking = [m.track_running_stats for m in bns]
    for p, _ in req:
        p.requires_grad_(False)
    for m in bns:
        m.track_running_stats = False
    try:
        yield
    finally:
        for p, r in req:
            p.requires_grad_(r)
        for m, t in zip(bns, tracking):
            m.track_running_stats = t


def _batch_tensors(batch):
    p = torch.stack([pair[0].to_tensor() for pair in batch])
    r = torch.stack([pair[1].to_tensor() for pair in batch])
    return p, r


class Trainer:
    """Owns the generator, optional discriminator, their optimizers and the step count."""

    def __init__(self, config, backbone):
        self.config = config
        self.backbone = backbone
        self.generator = build_generator(config.resolved_generator(), seed=config.seed)
        self.generator.train()
        self.opt_g = torch.optim.Adam(
            self.generator.parameters(), lr=config.gen_lr, betas=ADAM_BETAS
        )
        if config.adversarial:
            self.discriminator = build_discriminator(seed=config.seed + 1)
            self.discriminator.train()
            self.opt_d = torch.optim.Adam(
                self.discriminator.parameters(), lr=config.disc_lr, betas=ADAM_BETAS
            )
        else:
            self.discriminator = None
            self.opt_d = None
        self.step = 0
        self.history = []
        # p's content features and r's style Grams are constant across steps;
        # cache them per patch object (datasets are immutable)
        self._content_cache = {}
        self._gram_cache = {}

    # -- sub-steps ---------------------------------------------------------

    def discriminator_substep(self, p, r, t=None):
        """One Adam step on the discriminator loss with the generator frozen.

        `t`, when given, is the already-transformed batch (detached); otherwise
        it is generated here.
        """
        if t is None:
            with frozen(self.generator), torch.no_grad():
                t = self.generator(p).transformed
        self.opt_d.zero_grad()
        loss = L.discriminator_loss(self.discriminator(r), self.discriminator(t.detach()))
        loss.backward()
        self.opt_d.step()
        return float(loss.detach())

    def _input_content_features(self, patches):
        """Content-layer features of the fixed input patches, computed once each."""
        layer = self.backbone.content_layer
        feats = []
        for patch in patches:
            key = id(patch)
            if key not in self._content_cache:
                with torch.no_grad():
                    stack = self.backbone.extract_features(
                        patch.to_tensor().unsqueeze(0), [layer]
                    )
                # keep the patch alive so its id() is never recycled
                self._content_cache[key] = (patch, stack.layers[layer][0])
            feats.append(self._content_cache[key][1])
        return feats

    def _reference_grams(self, patches, style_layers):
        """Style-layer Gram matrices of the fixed reference patches, computed once each."""
        out = []
        for patch in patches:
            key = (id(patch), style_layers)
            if key not in self._gram_cache:
                with torch.no_grad():
                    stack = self.backbone.extract_features(
                        patch.to_tensor().unsqueeze(0), list(style_layers)
                    )
                grams = {name: gram(stack.layers[name][0], name) for name in style_layers}
                self._gram_cache[key] = (patch, grams)
            out.append(self._gram_cache[key][1])
        return out

    def generator_substep(self, p, r, batch=None, t=None):
        """One Adam step on the total generator loss with the discriminator frozen.

        When `batch` (the list of (input, reference) Patch pairs behind the
        tensors) is given, the input content features and reference Grams come
        from the per-patch cache instead of being recomputed every step. `t`,
        when given, must be the differentiable transformed batch for `p`.
        """
        cfg = self.config
        if t is None:
            t = self.generator(p).transformed
        content_layer = self.backbone.content_layer
        style_layers = [name for name in cfg.weights.omega]
        stack_t = self.backbone.extract_features(t, [content_layer] + style_layers)
        b = p.shape[0]
        if batch is not None:
            p_feats = self._input_content_features([pair[0] for pair in batch])
            r_grams_all = self._reference_grams(
                [pair[1] for pair in batch], tuple(style_layers)
            )
        else:
            stack_p = self.backbone.extract_features(p, [content_layer])
            stack_r = self.backbone.extract_features(r, style_layers)
            p_feats = [stack_p.layers[content_layer][i] for i in range(b)]
            r_grams_all = [
                {name: gram(stack_r.layers[name][i], name) for name in style_layers}
                for i in range(b)
            ]

        content = sum(
            L.content_loss(p_feats[i], stack_t.layers[content_layer][i]) for i in range(b)
        ) / b
        style_total = 0.0
        per_layer = {name: 0.0 for name in style_layers}
        for i in range(b):
            t_grams = {name: gram(stack_t.layers[name][i], name) for name in style_layers}
            s, pl = L.style_loss(r_grams_all[i], t_grams, cfg.weights.omega)
            style_total = style_total + s / b
            for name in style_layers:
                per_layer[name] = per_layer[name] + float(pl[name].detach()) / b

        if self.discriminator is not None:
            with frozen(self.discriminator):
                adv = L.adversarial_loss(self.discriminator(t))
        else:
            adv = torch.zeros(())

        total, report = L.total_generator_loss(
            content, style_total, adv, cfg.weights, per_layer_style=per_layer
        )
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return report

    def train_step(self, batch):
        """Run one alternating step on a batch of (input, reference) pairs."""
        p, r = _batch_tensors(batch)
        # the discriminator sub-step does not touch the generator, so the
        # transformed batch can be computed once and shared by both sub-steps
        t = self.generator(p).transformed
        disc = (
            self.discriminator_substep(p, r, t=t)
            if self.discriminator is not None
            else 0.0
        )
        report = self.generator_substep(p, r, batch=batch, t=t)
        if not math.isfinite(report.total) or abs(report.total) > DIVERGENCE_LIMIT:
            raise DivergenceError(self.step, report.total)
        row = {
            "step": self.step,
            "content": report.content,
            "style": report.style,
            "adversarial": report.adversarial,
            "disc": disc,
            "total": report.total,
        }
        self.history.append(row)
        self.step += 1
        return report

    # -- persistence -------------------------------------------------------

    def _opt_tensors(self, prefix, opt):
        out = {}
        sd = opt.state_dict()
        for idx in sorted(sd["state"]):
            for key in ("step", "exp_avg", "exp_avg_sq"):
                out[f"{prefix}/{idx}/{key}"] = sd["state"][idx][key]
        return out

    def _load_opt(self, prefix, opt, tensors):
        sd = opt.state_dict()
        state = {}
        idx = 0
        while f"{prefix}/{idx}/step" in tensors:
            state[idx] = {
                "step": tensors[f"{prefix}/{idx}/step"],
                "exp_avg": tensors[f"{prefix}/{idx}/exp_avg"],
                "exp_avg_sq": tensors[f"{prefix}/{idx}/exp_avg_sq"],
            }
            idx += 1
        sd["state"] = state
        opt.load_state_dict(sd)

    def save(self, path):
        tensors = {"step": torch.tensor([self.step], dtype=torch.int64)}
        for name, t in self.generator.state_dict().items():
            tensors[f"gen/{name}"] = t
        tensors.update(self._opt_tensors("opt_g", self.opt_g))
        if self.discriminator is not None:
            for name, t in self.discriminator.state_dict().items():
                tensors[f"disc/{name}"] = t
            tensors.update(self._opt_tensors("opt_d", self.opt_d))
        meta = {"kind": "train_state", "config": self.config.to_dict()}
        ckpt.save_tensors(path, tensors, meta=meta)

    @classmethod
    def load(cls, path, backbone):
        tensors, meta = ckpt.load_tensors(path)
        if meta.get("kind") != "train_state":
            raise ckpt.CheckpointError(f"{path} is not a training checkpoint")
        config = TrainConfig.from_dict(meta["config"])
        trainer = cls(config, backbone)
        trainer.step = int(tensors["step"][0])
        gen_state = {
            name[len("gen/"):]: t for name, t in tensors.items() if name.startswith("gen/")
        }
        trainer.generator.load_state_dict(gen_state)
        trainer._load_opt("opt_g", trainer.opt_g, tensors)
        if trainer.discriminator is not None:
            disc_state = {
                name[len("disc/"):]: t for name, t in tensors.items() if name.startswith("disc/")
            }
            trainer.discriminator.load_state_dict(disc_state)
            trainer._load_opt("opt_d", trainer.opt_d, tensors)
        return trainer


def _write_journal(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=JOURNAL_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_journal(path):
    with open(path, newline="") as f:
        rows = []
        for row in csv.DictReader(f):
            rows.append(
                {k: (int(row[k]) if k == "step" else float(row[k])) for k in JOURNAL_FIELDS}
            )
        return rows


def _plot_losses(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 5))
    for key in ("content", "style", "adversarial", "disc", "total"):
        ax.plot(steps, [r[key] for r in rows], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fit(config, dataset, backbone, run_dir=None, resume_from=None):
    """Train on a paired dataset; returns the final Trainer.

    `run_dir`, when given, receives the loss journal CSV, a resolved config
    snapshot, periodic checkpoints and a loss-curve figure. Resuming from a
    checkpoint continues the journal from the checkpoint's step and reproduces
    the uninterrupted run exactly.
    """
    if len(dataset) < 1:
        raise ValueError("dataset must be non-empty")
    if resume_from is not None:
        trainer = Trainer.load(resume_from, backbone)
        config = trainer.config
    else:
        trainer = Trainer(config, backbone)

    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    journal_path = checkpoint_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(config, run_dir / "config.json")
        journal_path = run_dir / "journal.csv"
        checkpoint_dir = run_dir / "checkpoints"
        checkpoint_dir.mkdir(exist_ok=True)
        if resume_from is not None and journal_path.exists():
            trainer.history = [
                row for row in read_journal(journal_path) if row["step"] < trainer.step
            ]

    cached_epoch, cached_batches = -1, None
    while trainer.step < total_steps:
        epoch, batch_index = divmod(trainer.step, steps_per_epoch)
        if epoch != cached_epoch:
            cached_batches = list(
                epoch_batches(dataset, config.batch_size, config.seed, epoch)
            )
            cached_epoch = epoch
        try:
            trainer.train_step(cached_batches[batch_index])
        except DivergenceError:
            if journal_path is not None:
                _write_journal(journal_path, trainer.history)
            raise
        if journal_path is not None:
            _write_journal(journal_path, trainer.history)
            if (
                config.checkpoint_every > 0
                and trainer.step % config.checkpoint_every == 0
            ):
                trainer.save(checkpoint_dir / f"step_{trainer.step:06d}.stfg")

    if run_dir is not None:
        trainer.save(checkpoint_dir / "latest.stfg")
        if trainer.history:
            _plot_losses(trainer.history, run_dir / "loss_curves.png")
    return trainer
