"""Mixed-batch adversarial training loop.

Each step draws an unconditional sub-batch from all training images and a
conditional sub-batch from the labeled subset, runs one discriminator
update (BCE on the image head, weighted per-pixel CE on the decoder head,
LabelMix consistency, lazy R1 on the image head every `r1_interval`
steps) and one generator update, then advances the EMA copy of the
generator. All stochastic draws come from a single torch.Generator in a
fixed per-step order, so runs are bitwise reproducible and checkpoints
can resume mid-run without divergence.

Modes: joint trains both branches; cond_only / uncond_only train one;
the stage_* modes train one branch for the first `stage_split` fraction
of steps, then freeze its parameters (requires_grad off and excluded
from fresh optimizers) and train the remaining parameters.

Steps are reported 1-indexed; R1 fires on uncond-branch D updates whose
1-indexed step is divisible by r1_interval, so n steps see exactly
floor(n / r1_interval) applications.
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from . import losses, metrics, pngio
from .config import RunConfig, parse_config, serialize_config
from .discriminator import Discriminator
from .errors import ConfigurationError, NumericalAbortError
from .generator import Generator

ABLATION_MODES = (
    "joint",
    "cond_only",
    "uncond_only",
    "stage_uncond_then_cond",
    "stage_cond_then_uncond",
)

_METRIC_FIELDS = (
    "d_uncond", "d_uncond_w", "d_cond", "d_labelmix", "d_r1", "d_total",
    "g_uncond", "g_uncond_w", "g_cond", "g_total",
    "d_grad_norm", "g_grad_norm",
)


@dataclass
class StepMetrics:
    step: int
    branch: str
    d_uncond: float = 0.0
    d_uncond_w: float = 0.0
    d_cond: float = 0.0
    d_labelmix: float = 0.0
    d_r1: float = 0.0
    d_total: float = 0.0
    g_uncond: float = 0.0
    g_uncond_w: float = 0.0
    g_cond: float = 0.0
    g_total: float = 0.0
    d_grad_norm: float = 0.0
    g_grad_norm: float = 0.0
    wall: float = 0.0

    def to_line(self) -> str:
        parts = [f"step={self.step}", f"branch={self.branch}"]
        parts += [f"{k}={getattr(self, k):.10g}" for k in _METRIC_FIELDS]
        parts.append(f"wall={self.wall:.4f}")
        return " ".join(parts)


@dataclass
class RunArtifacts:
    run_dir: str | None
    final_step: int
    final_checkpoint: str | None
    report: metrics.MetricsReport | None = None
    last_metrics: StepMetrics | None = None


def ema_update(live_params, ema_params, decay: float = 0.999):
    """ema <- decay * ema + (1 - decay) * live, parameter-wise."""
    with torch.no_grad():
        for live, ema in zip(live_params, ema_params):
            if live.shape != ema.shape:
                raise ConfigurationError(
                    f"ema shape mismatch {tuple(ema.shape)} vs {tuple(live.shape)}"
                )
            ema.mul_(decay).add_(live, alpha=1.0 - decay)


def _grad_norm(parameters) -> float:
    total = 0.0
    for p in parameters:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return math.sqrt(total)


class Trainer:
    def __init__(self, cfg: RunConfig, dataset, run_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.run_dir = run_dir
        tc = cfg.train
        self.num_classes = dataset.num_classes
        self.resolution = dataset.resolution
        self.bs_cond = tc.resolved_bs_cond(dataset.split.regime)

        needs_cond = tc.mode != "uncond_only"
        needs_uncond = tc.mode != "cond_only"
        if needs_cond:
            if not dataset.split.labeled_indices:
                raise ConfigurationError(
                    f"mode {tc.mode!r} needs labeled samples, dataset has none"
                )
            if self.bs_cond < 1:
                raise ConfigurationError(
                    f"mode {tc.mode!r} needs bs_cond >= 1, got {self.bs_cond}"
                )
        if needs_uncond and tc.bs_uncond < 1:
            raise ConfigurationError(
                f"mode {tc.mode!r} needs bs_uncond >= 1, got {tc.bs_uncond}"
            )

        torch.manual_seed(tc.seed)  # deterministic module construction
        torch.set_flush_denormal(True)  # denormals stall CPU conv kernels
        self.gen = Generator(cfg.model, self.num_classes, self.resolution,
                             gumbel_tau=tc.gumbel_tau)
        self.disc = Discriminator(cfg.model, self.num_classes, self.resolution)
        self.ema = copy.deepcopy(self.gen)
        self.ema.requires_grad_(False)
        self.ema.eval()
        # oneDNN's NHWC conv kernels are the fast path on CPU
        for mod in (self.gen, self.disc, self.ema):
            mod.to(memory_format=torch.channels_last)

        self.rng = torch.Generator()
        self.rng.manual_seed(tc.seed)
        self.step = 0  # completed steps

        images = np.stack([s.image for s in dataset.train])
        labels = np.stack([s.labels for s in dataset.train])
        self.images = torch.from_numpy(images)
        self.labels = torch.from_numpy(labels)
        self.labeled_idx = torch.tensor(
            dataset.split.labeled_indices, dtype=torch.long
        )
        self.last_cond_indices = None  # exposed for regime instrumentation

        self.phase_boundary = None
        if tc.mode.startswith("stage_"):
            self.phase_boundary = int(round(tc.total_steps * tc.stage_split))
        self.in_phase2 = False
        self._build_optimizers(self.gen.parameters(), self.disc.parameters())
        self._log_fh = None

    # ------------------------------------------------------------------
    # mode machinery

    def _build_optimizers(self, gen_params, disc_params):
        tc = self.cfg.train
        betas = (tc.adam_b1, tc.adam_b2)
        self.g_opt = torch.optim.Adam(list(gen_params), lr=tc.lr, betas=betas)
        self.d_opt = torch.optim.Adam(list(disc_params), lr=tc.lr, betas=betas)

    def _branch_modules(self, branch: str):
        if branch == "uncond":
            gen_mods = [self.gen.uncond_style, self.gen.synthesis]
            disc_mods = [self.disc.stem, self.disc.blocks,
                         self.disc.head_conv, self.disc.head_fc]
        else:
            gen_mods = [self.gen.cond_style, self.gen.synthesis]
            disc_mods = [self.disc.stem, self.disc.blocks, self.disc.aspp,
                         self.disc.decoder, self.disc.classify]
        return gen_mods, disc_mods

    def _first_stage_branch(self) -> str:
        return ("uncond" if self.cfg.train.mode == "stage_uncond_then_cond"
                else "cond")

    def _apply_phase2(self):
        """Freeze first-stage params; fresh optimizers over the rest."""
        gen_mods, disc_mods = self._branch_modules(self._first_stage_branch())
        frozen = set()
        for mod in gen_mods + disc_mods:
            for p in mod.parameters():
                p.requires_grad_(False)
                frozen.add(id(p))
        gen_live = [p for p in self.gen.parameters() if id(p) not in frozen]
        disc_live = [p for p in self.disc.parameters() if id(p) not in frozen]
        self._build_optimizers(gen_live, disc_live)
        self.in_phase2 = True
        self._log_event(f"event=phase_transition step={self.step}")

    def _maybe_phase_transition(self):
        if (self.phase_boundary is not None and not self.in_phase2
                and self.step >= self.phase_boundary):
            self._apply_phase2()

    def _active_branches(self):
        """(uncond_active, cond_active) for the step about to run."""
        mode = self.cfg.train.mode
        if mode == "joint":
            return True, True
        if mode == "uncond_only":
            return True, False
        if mode == "cond_only":
            return False, True
        first = self._first_stage_branch()
        current = ("uncond" if (first == "uncond") != self.in_phase2
                   else "cond")
        return current == "uncond", current == "cond"

    # ------------------------------------------------------------------
    # batch sampling (fixed draw order; everything comes from self.rng)

    def _sample_uncond_batch(self):
        n = self.images.shape[0]
        idx = torch.randint(0, n, (self.cfg.train.bs_uncond,),
                            generator=self.rng)
        x = self.images[idx].clone()
        coins = torch.rand(len(idx), generator=self.rng) \
            < self.cfg.data.flip_prob
        if coins.any():
            x[coins] = x[coins].flip(-1)
        return x

    def _sample_cond_batch(self):
        sel = torch.randint(0, len(self.labeled_idx), (self.bs_cond,),
                            generator=self.rng)
        idx = self.labeled_idx[sel]
        self.last_cond_indices = idx.tolist()
        x = self.images[idx].clone()
        y = self.labels[idx].clone()
        coins = torch.rand(len(idx), generator=self.rng) \
            < self.cfg.data.flip_prob
        if coins.any():
            x[coins] = x[coins].flip(-1)
            y[coins] = y[coins].flip(-1)
        seg = F.one_hot(y, self.num_classes).permute(0, 3, 1, 2).float()
        return x, seg

    # ------------------------------------------------------------------
    # the step

    def _check_finite(self, components: dict, stage: str):
        def val(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        bad = {k: v for k, v in components.items()
               if not math.isfinite(val(v))}
        if bad:
            snapshot = {"step": self.step + 1, "stage": stage}
            snapshot.update({k: val(v) for k, v in components.items()})
            raise NumericalAbortError(
                f"non-finite {'/'.join(sorted(bad))} in {stage} "
                f"at step {self.step + 1}",
                snapshot=snapshot,
            )

    def train_step(self, labeled_batch=None, unlabeled_batch=None) -> StepMetrics:
        """One D update, one G update, one EMA update.

        Batches are drawn internally from the trainer RNG unless passed
        explicitly (labeled_batch = (images, one-hot segs)).
        """
        t0 = time.perf_counter()
        self._maybe_phase_transition()
        tc = self.cfg.train
        uncond_on, cond_on = self._active_branches()
        step_number = self.step + 1  # 1-indexed
        r1_now = uncond_on and tc.r1_interval > 0 \
            and step_number % tc.r1_interval == 0

        self.gen.train()
        self.disc.train()

        x_u = None
        if uncond_on:
            x_u = unlabeled_batch if unlabeled_batch is not None \
                else self._sample_uncond_batch()
        x_c = seg = alpha = None
        if cond_on:
            x_c, seg = labeled_batch if labeled_batch is not None \
                else self._sample_cond_batch()
            alpha = losses.class_weights(seg)

        zero = torch.zeros(())
        branch = {(True, True): "joint", (True, False): "uncond",
                  (False, True): "cond"}[(uncond_on, cond_on)]
        m = StepMetrics(step=step_number, branch=branch)

        # ---- fakes (drawn once, graph kept for the G update) ---------
        # Draw order per step: z_u, gumbel_u, z64_c, gumbel_c, mix coins.
        fake_u = fake_c = mask = None
        if uncond_on:
            z = torch.randn(x_u.shape[0], self.cfg.model.latent_dim,
                            generator=self.rng)
            fake_u = self.gen.generate_uncond(z, generator=self.rng)
        if cond_on:
            z64 = torch.randn(x_c.shape[0], self.cfg.model.cond_noise_dim,
                              generator=self.rng)
            fake_c = self.gen.generate_cond(z64, seg, generator=self.rng)
            mask = losses.labelmix_mask(seg, generator=self.rng)

        # ---- discriminator update -----------------------------------
        # The D update sees the fakes detached; real, fake (and the
        # LabelMix blend) of one sub-batch share a forward pass.
        self.d_opt.zero_grad(set_to_none=True)
        d_uncond = d_cond = d_lm = d_r1 = zero
        if uncond_on:
            nu = x_u.shape[0]
            logits = self.disc(torch.cat([x_u, fake_u.detach()]),
                               need_pixels=False).image_logit
            d_uncond = losses.loss_d_uncond(logits[:nu], logits[nu:])
            if r1_now:
                x_r1 = x_u.detach().clone().requires_grad_(True)
                d_r1 = losses.r1_penalty(
                    x_r1,
                    lambda x: self.disc(x, need_pixels=False).image_logit,
                    gamma=tc.r1_gamma, lazy_interval=tc.r1_interval,
                )
        if cond_on:
            nc = x_c.shape[0]
            fc = fake_c.detach()
            mix = losses.labelmix_image(x_c, fc, mask)
            pl = self.disc(torch.cat([x_c, fc, mix]),
                           need_image=False).pixel_logits
            pl_real, pl_fake, pl_mix = pl[:nc], pl[nc:2 * nc], pl[2 * nc:]
            d_cond = losses.loss_d_cond(pl_real, seg, pl_fake, alpha)
            d_lm = losses.labelmix_loss(x_c, fc, mask, self.disc,
                                        pixel_real=pl_real,
                                        pixel_fake=pl_fake,
                                        pixel_mix=pl_mix)
        d_total = tc.uncond_loss_weight * d_uncond + d_cond \
            + tc.lambda_labelmix * d_lm + d_r1
        self._check_finite(
            {"d_uncond": d_uncond, "d_cond": d_cond, "d_labelmix": d_lm,
             "d_r1": d_r1, "d_total": d_total}, "d_update")
        d_total.backward()
        m.d_grad_norm = _grad_norm(self.disc.parameters())
        self._check_finite({"d_grad_norm": m.d_grad_norm}, "d_update")
        self.d_opt.step()

        # ---- generator update ---------------------------------------
        # Reuses the fakes generated above (G params are unchanged by
        # the D update); D is re-run because its weights just moved.
        prev_flags = [(p, p.requires_grad) for p in self.disc.parameters()]
        for p, _ in prev_flags:
            p.requires_grad_(False)
        try:
            self.g_opt.zero_grad(set_to_none=True)
            g_uncond = g_cond = zero
            if uncond_on:
                logit_fake = self.disc(fake_u, need_pixels=False).image_logit
                g_uncond = losses.loss_g_uncond(logit_fake)
            if cond_on:
                pl_fake_g = self.disc(fake_c, need_image=False).pixel_logits
                g_cond = losses.loss_g_cond(pl_fake_g, seg, alpha)
            g_total = tc.uncond_loss_weight * g_uncond + g_cond
            self._check_finite(
                {"g_uncond": g_uncond, "g_cond": g_cond, "g_total": g_total},
                "g_update")
            g_total.backward()
            m.g_grad_norm = _grad_norm(self.gen.parameters())
            self._check_finite({"g_grad_norm": m.g_grad_norm}, "g_update")
            self.g_opt.step()
        finally:
            for p, flag in prev_flags:
                p.requires_grad_(flag)

        ema_update(self.gen.parameters(), self.ema.parameters(), tc.ema_decay)
        self.step = step_number

        def out(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        m.d_uncond = out(d_uncond)
        m.d_uncond_w = out(tc.uncond_loss_weight * d_uncond)
        m.d_cond = out(d_cond)
        m.d_labelmix = out(d_lm)
        m.d_r1 = out(d_r1)
        m.d_total = out(d_total)
        m.g_uncond = out(g_uncond)
        m.g_uncond_w = out(tc.uncond_loss_weight * g_uncond)
        m.g_cond = out(g_cond)
        m.g_total = out(g_total)
        m.wall = time.perf_counter() - t0
        return m

    # ------------------------------------------------------------------
    # artifacts

    def _log_event(self, line: str):
        if self._log_fh is not None:
            self._log_fh.write(line + "\n")
            self._log_fh.flush()

    def _ckpt_path(self, step: int) -> str:
        return os.path.join(self.run_dir, "ckpt", f"step_{step:06d}.bin")

    def _optimizer_state_tensors(self, opt, model) -> dict:
        names = {id(p): n for n, p in model.named_parameters()}
        out = {}
        for group in opt.param_groups:
            for p in group["params"]:
                st = opt.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                out[f"{n}.exp_avg"] = st["exp_avg"]
                out[f"{n}.exp_avg_sq"] = st["exp_avg_sq"]
                step = st["step"]
                out[f"{n}.step"] = (step.detach().clone() if torch.is_tensor(step)
                                    else torch.tensor(float(step)))
        return out

    def _restore_optimizer(self, opt, model, state: dict):
        params = dict(model.named_parameters())
        in_opt = {id(p) for g in opt.param_groups for p in g["params"]}
        names = sorted({k.rsplit(".", 1)[0] for k in state})
        for n in names:
            p = params.get(n)
            if p is None:
                raise ConfigurationError(
                    f"checkpoint optimizer state for unknown parameter {n!r}"
                )
            if id(p) not in in_opt:
                raise ConfigurationError(
                    f"checkpoint optimizer state for non-optimized "
                    f"parameter {n!r}"
                )
            exp_avg = state[f"{n}.exp_avg"]
            if exp_avg.shape != p.shape:
                raise ConfigurationError(
                    f"checkpoint parameter {n!r}: optimizer moment shape "
                    f"{tuple(exp_avg.shape)} vs model {tuple(p.shape)}"
                )
            opt.state[p] = {
                "step": state[f"{n}.step"].clone(),
                "exp_avg": exp_avg.clone(),
                "exp_avg_sq": state[f"{n}.exp_avg_sq"].clone(),
            }

    def save(self, path):
        def tensors(model):
            return {k: v for k, v in model.state_dict().items()}

        ckpt_io.save_checkpoint(
            path,
            step=self.step,
            config_text=serialize_config(self.cfg),
            gen=tensors(self.gen),
            ema=tensors(self.ema),
            disc=tensors(self.disc),
            opt_g=self._optimizer_state_tensors(self.g_opt, self.gen),
            opt_d=self._optimizer_state_tensors(self.d_opt, self.disc),
            rng=self.rng.get_state().numpy().tobytes(),
        )

    def _load_state_dict_checked(self, model, tensors: dict, section: str):
        current = model.state_dict()
        missing = sorted(set(current) - set(tensors))
        extra = sorted(set(tensors) - set(current))
        if missing or extra:
            raise ConfigurationError(
                f"checkpoint section {section!r} does not match model: "
                f"missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for k, v in tensors.items():
            if tuple(v.shape) != tuple(current[k].shape):
                raise ConfigurationError(
                    f"checkpoint parameter {section}.{k}: shape "
                    f"{tuple(v.shape)} vs model {tuple(current[k].shape)}"
                )
        model.load_state_dict(tensors)

    def restore(self, data: ckpt_io.CheckpointData):
        """Restore models, optimizers, step counter, and RNG state."""
        self.step = data.step
        if self.phase_boundary is not None and self.step > self.phase_boundary:
            self._apply_phase2()
        self._load_state_dict_checked(self.gen, data.gen, "gen")
        self._load_state_dict_checked(self.ema, data.ema, "ema")
        self._load_state_dict_checked(self.disc, data.disc, "disc")
        self._restore_optimizer(self.g_opt, self.gen, data.opt_g)
        self._restore_optimizer(self.d_opt, self.disc, data.opt_d)
        state = np.frombuffer(data.rng, dtype=np.uint8).copy()
        self.rng.set_state(torch.from_numpy(state))

    def _write_samples(self, step: int):
        if self.run_dir is None:
            return
        view = torch.Generator()
        view.manual_seed(9999)
        self.ema.eval()
        sdir = os.path.join(self.run_dir, "samples")
        with torch.no_grad():
            z = torch.randn(16, self.cfg.model.latent_dim, generator=view)
            imgs = self.ema.generate_uncond(z).numpy()
            pngio.save_image(
                os.path.join(sdir, f"step_{step:06d}_uncond.png"),
                pngio.image_grid(list(imgs), cols=4),
            )
            if self.dataset.val:
                from .data import one_hot_encode
                idx = [i % len(self.dataset.val) for i in range(16)]
                seg = torch.from_numpy(np.stack([
                    one_hot_encode(self.dataset.val[i].labels, self.num_classes)
                    for i in idx
                ]))
                z64 = torch.randn(16, self.cfg.model.cond_noise_dim,
                                  generator=view)
                cimgs = self.ema.generate_cond(z64, seg).numpy()
                pngio.save_image(
                    os.path.join(sdir, f"step_{step:06d}_cond.png"),
                    pngio.image_grid(list(cimgs), cols=4),
                )

    def _extractor(self):
        return metrics.RandomConvExtractor(
            seed=self.cfg.model.extractor_seed,
            dim=self.cfg.model.extractor_dim,
            batch=self.cfg.eval.eval_batch,
        )

    def evaluate(self) -> metrics.MetricsReport:
        ec = self.cfg.eval
        n = ec.samples_per_set or len(self.dataset.val)
        return metrics.evaluate(
            self.ema, self.dataset, self._extractor(), n,
            sets=ec.eval_sets, base_seed=ec.eval_seed, batch=ec.eval_batch,
        )

    def run(self, eval_at_end: bool = False) -> RunArtifacts:
        tc = self.cfg.train
        final_ckpt = None
        if self.run_dir is not None:
            os.makedirs(os.path.join(self.run_dir, "ckpt"), exist_ok=True)
            os.makedirs(os.path.join(self.run_dir, "samples"), exist_ok=True)
            snap = os.path.join(self.run_dir, "config.snapshot")
            with open(snap, "w", encoding="utf-8") as fh:
                fh.write(serialize_config(self.cfg))
            self._log_fh = open(os.path.join(self.run_dir, "metrics.log"),
                                "a", encoding="utf-8")
            if self.step == 0:
                self.save(self._ckpt_path(0))
                self._write_samples(0)

        last = None
        try:
            while self.step < tc.total_steps:
                last = self.train_step()
                if tc.log_interval and last.step % tc.log_interval == 0:
                    self._log_event(last.to_line())
                if self.run_dir is not None and tc.checkpoint_interval \
                        and last.step % tc.checkpoint_interval == 0 \
                        and last.step < tc.total_steps:
                    self.save(self._ckpt_path(last.step))
                    self._write_samples(last.step)
                    self._log_event(
                        f"event=checkpoint step={last.step}"
                    )
                if tc.eval_interval and last.step % tc.eval_interval == 0 \
                        and last.step < tc.total_steps:
                    report = self.evaluate()
                    self._log_event(
                        f"event=eval step={last.step} "
                        f"fid={report.fid_mean:.6g} "
                        f"cfid={report.cfid_mean:.6g} "
                        f"miou={report.miou_mean:.6g}"
                    )
        except NumericalAbortError as exc:
            snap = json.dumps(exc.snapshot or {}, sort_keys=True)
            self._log_event(f"event=abort reason={exc} snapshot={snap}")
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
            raise

        report = None
        if self.run_dir is not None:
            final_ckpt = self._ckpt_path(self.step)
            self.save(final_ckpt)
            self._write_samples(self.step)
            self._log_event(f"event=checkpoint step={self.step} final=1")
        if eval_at_end:
            report = self.evaluate()
            self._log_event(
                f"event=eval step={self.step} fid={report.fid_mean:.6g} "
                f"cfid={report.cfid_mean:.6g} miou={report.miou_mean:.6g}"
            )
            if self.run_dir is not None:
                with open(os.path.join(self.run_dir, "report.json"), "w",
                          encoding="utf-8") as fh:
                    fh.write(report.to_json())
                with open(os.path.join(self.run_dir, "report.txt"), "w",
                          encoding="utf-8") as fh:
                    fh.write(report.to_text())
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
        return RunArtifacts(
            run_dir=self.run_dir, final_step=self.step,
            final_checkpoint=final_ckpt, report=report, last_metrics=last,
        )


# ----------------------------------------------------------------------
# ablation harness

@dataclass
class AblationResult:
    rows: list = field(default_factory=list)  # (mode, MetricsReport)
    table_text: str = ""

    def to_dict(self) -> dict:
        return {
            mode: {"fid": r.fid_mean, "cfid": r.cfid_mean,
                   "miou": r.miou_mean}
            for mode, r in self.rows
        }


def format_ablation_table(rows) -> str:
    lines = [f"{'mode':<26} {'fid':>10} {'cfid':>10} {'miou':>8}"]
    for mode, r in rows:
        lines.append(
            f"{mode:<26} {r.fid_mean:>10.4f} {r.cfid_mean:>10.4f} "
            f"{r.miou_mean:>8.4f}"
        )
    return "\n".join(lines) + "\n"


def run_ablation(cfg: RunConfig, dataset, out_dir, budget: int) -> AblationResult:
    """Train every mode at an equal step budget and tabulate FID/CFID/mIoU."""
    if budget < 0:
        raise ConfigurationError(f"budget must be >= 0, got {budget}")
    rows = []
    for mode in ABLATION_MODES:
        mcfg = parse_config(serialize_config(cfg))  # deep copy via fixpoint
        mcfg.train.mode = mode
        mcfg.train.total_steps = budget
        mcfg.validate()
        trainer = Trainer(mcfg, dataset,
                          run_dir=os.path.join(out_dir, mode))
        artifacts = trainer.run(eval_at_end=True)
        rows.append((mode, artifacts.report))
    result = AblationResult(rows=rows, table_text=format_ablation_table(rows))
    with open(os.path.join(out_dir, "ablation_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(result.table_text)
    with open(os.path.join(out_dir, "ablation_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result
