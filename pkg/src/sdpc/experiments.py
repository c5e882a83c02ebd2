"""Experiment commands: preprocessing cache, training, denoising, sparsity,
interaction maps and receptive-field mosaics.

Every command writes into ``<out_dir>/<command>/`` a ``config.txt`` echo, its
CSV outputs, a ``verdict.json`` of reference-value comparisons and, last, an
atomically written ``manifest.json``.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .analysis.gabor import OrientationAtlas, build_atlas, fit_atoms, write_atlas_csv
from .analysis.interaction import (
    CENTER,
    END,
    REGIONS,
    SIDE,
    activity_ratio,
    aggregate_maps,
    axis_profile,
    cocircularity_deviation,
    colinearity_deviation,
    nearest_feature,
    precision_ratio,
    region_mask,
    select_centers,
    shuffle_positions,
    write_map_csv,
)
from .analysis.metrics import active_fraction, ssim
from .analysis.stats import StatRow, StatSummary, median_mad, sign_test_passes, wilcoxon, write_stats_csv
from .checkpoint import Checkpoint, load_checkpoint, read_container, save_checkpoint, write_container
from .config import RunConfig
from .core import NetworkConfig, infer
from .data import (
    ImageBatch,
    NoiseSpec,
    WhiteningOperator,
    add_noise,
    apply_whitening,
    fit_whitening,
    image_dir_splits,
    lcn,
    stl10_splits,
    write_manifest,
)
from .errors import ConfigurationError, DataError
from .learn import back_project, effective_dictionary, train, write_loss_csv

logger = logging.getLogger(__name__)

CACHE_FORMAT = 1


# --------------------------------------------------------------------------
# Plumbing
# --------------------------------------------------------------------------


def file_sha256(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def write_json_atomic(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _finite_or_none(v):
    return None if v is None or not np.isfinite(v) else float(v)


@dataclass
class Verdict:
    target: str
    observed: object
    expected: str
    passed: bool
    informational: bool = False

    def as_dict(self):
        return {"target": self.target, "observed": self.observed, "expected": self.expected,
                "pass": bool(self.passed), "informational": self.informational}


class CommandRun:
    """Output directory, manifest and verdict bookkeeping for one command."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = os.path.join(cfg.out_dir, command)
        os.makedirs(self.dir, exist_ok=True)
        self.start = time.time()
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.verdicts: list[Verdict] = []
        self.non_converged = 0
        self.inferences = 0
        self.extra: dict[str, object] = {}
        with open(self.path("config.txt"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())
        self.outputs.append("config.txt")

    def path(self, *parts) -> str:
        p = os.path.join(self.dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def output(self, *parts) -> str:
        self.outputs.append(os.path.join(*parts))
        return self.path(*parts)

    def add_input(self, path) -> None:
        if path and os.path.isfile(path):
            self.inputs[os.path.abspath(path)] = file_sha256(path)

    def verdict(self, target, observed, expected, passed, informational=False):
        self.verdicts.append(Verdict(target, observed, expected, bool(passed), informational))

    def finish(self) -> dict:
        if self.verdicts:
            write_json_atomic(self.output("verdict.json"), [v.as_dict() for v in self.verdicts])
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.digest(),
            "inputs": self.inputs,
            "outputs": sorted(set(self.outputs)),
            "wall_clock_s": round(time.time() - self.start, 3),
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "convergence": {"inferences": self.inferences, "non_converged": self.non_converged},
        }
        manifest.update(self.extra)
        write_json_atomic(self.path("manifest.json"), manifest)
        return manifest


def _render(fn: Callable[[], None], what: str) -> None:
    """Figures are conveniences: failures are logged, never fatal."""
    try:
        fn()
    except Exception as exc:  # noqa: BLE001
        logger.warning("could not render %s: %s", what, exc)


# --------------------------------------------------------------------------
# Preprocessing cache
# --------------------------------------------------------------------------


@dataclass
class Prepared:
    train: ImageBatch
    test: ImageBatch
    whitening: WhiteningOperator | None
    cache_dir: str
    reused: bool
    inputs: dict[str, str] = field(default_factory=dict)


def _input_files(cfg: RunConfig) -> list[str]:
    if not cfg.data_dir:
        raise ConfigurationError("data_dir is not set")
    if not os.path.isdir(cfg.data_dir):
        raise ConfigurationError(f"data directory not found: {cfg.data_dir}")
    if cfg.dataset == "stl10":
        files = [os.path.join(cfg.data_dir, n) for n in ("train_X.bin", "test_X.bin")]
        for f in files:
            if not os.path.isfile(f):
                raise ConfigurationError(f"missing STL-10 file: {f}")
        return files
    return sorted(os.path.join(cfg.data_dir, n) for n in os.listdir(cfg.data_dir)
                  if os.path.isfile(os.path.join(cfg.data_dir, n)))


PREPROCESS_KEYS = ("dataset", "n_train", "n_test", "resize", "grayscale", "lcn_kernel", "lcn_sigma",
                   "lcn_eps", "whiten", "whiten_patch", "whiten_max_patches", "seed")


def _cache_key(cfg: RunConfig, checksums: dict[str, str]) -> str:
    h = hashlib.sha256(f"format={CACHE_FORMAT}\n".encode())
    for k in PREPROCESS_KEYS:
        h.update(f"{k}={getattr(cfg, k)!r}\n".encode())
    for path in sorted(checksums):
        h.update(f"{os.path.basename(path)}={checksums[path]}\n".encode())
    return h.hexdigest()


def _load_raw(cfg: RunConfig) -> tuple[ImageBatch, ImageBatch]:
    if cfg.dataset == "stl10":
        return stl10_splits(cfg.data_dir, cfg.n_train, cfg.n_test)
    return image_dir_splits(cfg.data_dir, cfg.n_train, cfg.n_test, resize=cfg.resize_hw(),
                            grayscale=cfg.grayscale)


def _save_batch(path, batch: ImageBatch, whitening: WhiteningOperator | None = None):
    tensors = {"images": batch.data}
    config = {"n": len(batch)}
    if whitening is not None:
        tensors["whitening.mean"] = whitening.mean
        tensors["whitening.matrix"] = whitening.matrix
        config.update({"whitening.epsilon": float(whitening.epsilon),
                       "whitening.patch_size": whitening.patch_size or "",
                       "whitening.channels": whitening.channels or ""})
    write_container(path, config, tensors)


def _load_batch(path, ids_path) -> tuple[ImageBatch, WhiteningOperator | None]:
    config, tensors = read_container(path)
    with open(ids_path, encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh if line.strip()]
    white = None
    if "whitening.mean" in tensors:
        ps, ch = config["whitening.patch_size"], config["whitening.channels"]
        white = WhiteningOperator(tensors["whitening.mean"].astype(np.float64),
                                  tensors["whitening.matrix"].astype(np.float64),
                                  float(config["whitening.epsilon"]),
                                  int(ps) if ps else None, int(ch) if ch else None)
    return ImageBatch(tensors["images"], ids), white


def prepare_data(cfg: RunConfig) -> Prepared:
    """Load, LCN-normalize and whiten both splits, reusing a checksum-keyed cache."""
    files = _input_files(cfg)
    checksums = {os.path.abspath(f): file_sha256(f) for f in files}
    key = _cache_key(cfg, checksums)
    cache_dir = os.path.join(cfg.cache_root(), f"preprocess-{key[:16]}")
    marker = os.path.join(cache_dir, "cache.json")
    if os.path.isfile(marker):
        try:
            with open(marker, encoding="utf-8") as fh:
                info = json.load(fh)
            if info.get("key") == key:
                train_b, white = _load_batch(os.path.join(cache_dir, "train.sdpc"),
                                             os.path.join(cache_dir, "train_ids.txt"))
                test_b, _ = _load_batch(os.path.join(cache_dir, "test.sdpc"),
                                        os.path.join(cache_dir, "test_ids.txt"))
                logger.info("reusing preprocessed cache %s", cache_dir)
                return Prepared(train_b, test_b, white, cache_dir, True, checksums)
        except (OSError, ValueError, DataError) as exc:
            logger.warning("ignoring unreadable cache %s: %s", cache_dir, exc)

    raw_train, raw_test = _load_raw(cfg)
    if len(raw_train) == 0:
        raise DataError(f"no training images in {cfg.data_dir}")
    if set(raw_train.ids) & set(raw_test.ids):
        raise DataError("train and test splits overlap")
    lcn_kw = dict(kernel_size=cfg.lcn_kernel, sigma=cfg.lcn_sigma, epsilon=cfg.lcn_eps)
    train_b, test_b = lcn(raw_train, **lcn_kw), lcn(raw_test, **lcn_kw)
    white = None
    if cfg.whiten:
        white = fit_whitening(train_b.data, patch_size=cfg.whiten_patch,
                              max_patches=cfg.whiten_max_patches, seed=cfg.seed)
        train_b, test_b = apply_whitening(white, train_b), apply_whitening(white, test_b)
    for b in (train_b, test_b):
        if not np.isfinite(b.data).all():
            raise DataError("preprocessing produced non-finite values")

    tmp_dir = cache_dir + ".tmp"
    shutil.rmtree(tmp_dir, ignore_errors=True)
    os.makedirs(tmp_dir)
    _save_batch(os.path.join(tmp_dir, "train.sdpc"), train_b, white)
    _save_batch(os.path.join(tmp_dir, "test.sdpc"), test_b)
    write_manifest(os.path.join(tmp_dir, "train_ids.txt"), train_b.ids)
    write_manifest(os.path.join(tmp_dir, "test_ids.txt"), test_b.ids)
    write_json_atomic(os.path.join(tmp_dir, "cache.json"),
                      {"key": key, "inputs": checksums, "n_train": len(train_b), "n_test": len(test_b),
                       "skipped": raw_train.skipped})
    shutil.rmtree(cache_dir, ignore_errors=True)
    os.replace(tmp_dir, cache_dir)
    return Prepared(train_b, test_b, white, cache_dir, False, checksums)


def cmd_preprocess(cfg: RunConfig) -> dict:
    run = CommandRun(cfg, "preprocess")
    prep = prepare_data(cfg)
    run.inputs.update(prep.inputs)
    run.extra.update({"cache_dir": os.path.abspath(prep.cache_dir), "cache_reused": prep.reused,
                      "n_train": len(prep.train), "n_test": len(prep.test)})
    write_manifest(run.output("train_ids.txt"), prep.train.ids)
    write_manifest(run.output("test_ids.txt"), prep.test.ids)
    if cfg.dataset == "stl10":
        run.verdict("split sizes 5000/1200", [len(prep.train), len(prep.test)], "[5000, 1200]",
                    (len(prep.train), len(prep.test)) == (5000, 1200), informational=True)
    return run.finish()


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> dict:
    run = CommandRun(cfg, "train")
    prep = prepare_data(cfg)
    run.inputs.update(prep.inputs)
    data = prep.train.tensor(cfg.torch_dtype)
    if cfg.subset:
        data = data[:cfg.subset]
    net = cfg.build_network()
    if net.layers[0].dictionary.in_channels != data.shape[1]:
        raise ConfigurationError(
            f"layer-1 atoms expect {net.layers[0].dictionary.in_channels} channels, data has {data.shape[1]}"
        )
    history = []
    loss_path = run.output("loss.csv")
    ckpt_dir = os.path.join("checkpoints")

    def on_epoch(epoch, net_e, records):
        history.extend(records)
        losses = {f"layer{r.layer}.{k}": getattr(r, k) for r in records
                  for k in ("reconstruction_loss", "sparsity_loss", "feedback_loss")}
        ckpt = Checkpoint(net_e, epoch, cfg.seed, losses, prep.whitening,
                          {"dataset": cfg.dataset, "config_hash": cfg.digest()})
        path = run.output(ckpt_dir, f"epoch_{epoch:04d}.sdpc")
        save_checkpoint(path, ckpt)
        shutil.copyfile(path, run.path("checkpoint.sdpc.tmp"))
        os.replace(run.path("checkpoint.sdpc.tmp"), run.path("checkpoint.sdpc"))
        write_loss_csv(loss_path, history)

    result = train(net, data, cfg.train_config(), on_epoch=on_epoch)
    run.outputs.append("checkpoint.sdpc")
    run.non_converged = result.non_converged
    run.inferences = cfg.epochs * len(data)
    shapes = [list(d.atoms.shape) for d in result.net.dictionaries]
    run.extra.update({"dictionary_shapes": shapes, "strides": [list(d.stride) for d in result.net.dictionaries],
                      "n_train_used": len(data), "epochs": cfg.epochs})
    last = {r.layer: r for r in history if r.epoch == cfg.epochs}
    run.verdict("finite losses", {k: v.reconstruction_loss for k, v in last.items()}, "finite",
                all(np.isfinite(v.reconstruction_loss) for v in last.values()))
    return run.finish()


# --------------------------------------------------------------------------
# Shared evaluation helpers
# --------------------------------------------------------------------------


def load_model(cfg: RunConfig) -> Checkpoint:
    path = cfg.checkpoint_path()
    if not os.path.isfile(path):
        raise ConfigurationError(f"checkpoint not found: {path} (run `sdpc train` or pass --checkpoint)")
    ckpt = load_checkpoint(path, dtype=cfg.torch_dtype)
    ckpt.net = ckpt.net.replace(max_iters=cfg.max_iters, t_stab=cfg.t_stab)
    return ckpt


def eval_images(cfg: RunConfig, prep: Prepared) -> ImageBatch:
    test = prep.test
    if cfg.eval_subset:
        test = test.subset(np.arange(min(cfg.eval_subset, len(test))))
    if len(test) == 0:
        raise DataError("no test images")
    return test


def infer_all(net: NetworkConfig, x: torch.Tensor, batch_size: int, run: CommandRun | None = None,
              on_batch: Callable[[int, list[torch.Tensor]], None] | None = None) -> list[np.ndarray] | None:
    """Batched inference; returns per-layer codes unless ``on_batch`` consumes them."""
    net = net.with_step_sizes(x.shape[1:])
    outs: list[list[np.ndarray]] = [[] for _ in range(net.n_layers)]
    for start in range(0, len(x), batch_size):
        res = infer(net, x[start:start + batch_size])
        if run is not None:
            run.inferences += len(res.converged)
            run.non_converged += int((~res.converged).sum())
        if on_batch is not None:
            on_batch(start, res.gammas)
        else:
            for i, g in enumerate(res.gammas):
                outs[i].append(g.detach().cpu().numpy())
    return None if on_batch is not None else [np.concatenate(o) for o in outs]


def _pair_test(a, b) -> StatSummary | None:
    try:
        return wilcoxon(a, b)
    except ValueError:
        return None


def _fmt_k(k: float) -> str:
    return f"{k:g}"


# --------------------------------------------------------------------------
# Denoising
# --------------------------------------------------------------------------


def cmd_denoise(cfg: RunConfig) -> dict:
    run = CommandRun(cfg, "denoise")
    prep = prepare_data(cfg)
    ckpt = load_model(cfg)
    run.add_input(cfg.checkpoint_path())
    test = eval_images(cfg, prep)
    clean = test.data
    image_shape = clean.shape[1:]
    ks, sigmas = cfg.k_fb_list(), cfg.sigma_list()
    L = ckpt.net.n_layers
    # records[(sigma, k)][layer] -> per-image SSIM; baseline[sigma] -> per-image SSIM
    records: dict[tuple[float, float], list[np.ndarray]] = {}
    baseline: dict[float, np.ndarray] = {}
    ranges = np.ptp(clean.mean(axis=1).reshape(len(clean), -1), axis=1)
    recon_example: dict[tuple[float, float], np.ndarray] = {}

    for sigma in sigmas:
        noisy = add_noise(clean, NoiseSpec(sigma, cfg.seed))
        baseline[sigma] = np.array([ssim(clean[n], noisy[n], data_range=ranges[n]) for n in range(len(clean))])
        x = torch.as_tensor(noisy).to(ckpt.net.dtype)
        for k in ks:
            scores = [np.zeros(len(clean)) for _ in range(L)]
            net_k = ckpt.net.replace(k_fb=k)

            def on_batch(start, gammas, net_k=net_k, scores=scores, k=k, sigma=sigma):
                for layer in range(1, L + 1):
                    rec = back_project(net_k, gammas[layer - 1], layer, input_shape=image_shape)
                    rec = rec.detach().cpu().numpy()
                    for j in range(len(rec)):
                        n = start + j
                        scores[layer - 1][n] = ssim(clean[n], rec[j], data_range=ranges[n])
                    if start == 0:
                        recon_example[(sigma, k, layer)] = rec[0]

            infer_all(net_k, x, cfg.batch_size, run, on_batch)
            records[(sigma, k)] = scores
        if sigma == sigmas[-1] or sigma == 0:
            recon_example[(sigma, "noisy")] = noisy[0]

    rows = []
    with open(run.output("denoise_records.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "sigma", "k_fb", "ssim_baseline"] + [f"ssim_layer{l}" for l in range(1, L + 1)])
        for sigma in sigmas:
            for k in ks:
                for n in range(len(clean)):
                    w.writerow([test.ids[n], _fmt_k(sigma), _fmt_k(k), f"{baseline[sigma][n]:.6g}"]
                               + [f"{records[(sigma, k)][l][n]:.6g}" for l in range(L)])
    k_ref = ks[0]
    for sigma in sigmas:
        rows.append(StatRow("ssim_baseline", "", _fmt_k(sigma), median_mad(baseline[sigma])))
        for k in ks:
            for layer in range(1, L + 1):
                vals = records[(sigma, k)][layer - 1]
                ref = baseline[sigma] if k == k_ref else records[(sigma, k_ref)][layer - 1]
                summary = median_mad(vals)
                test_ = _pair_test(vals, ref)
                summary.p_value = None if test_ is None else test_.p_value
                rows.append(StatRow(f"ssim_layer{layer}", _fmt_k(k), _fmt_k(sigma), summary))
    write_stats_csv(run.output("stats.csv"), rows)

    # reference-value comparisons
    if 0.0 in sigmas:
        for k in ks:
            med = float(np.median(records[(0.0, k)][0]))
            run.verdict(f"layer-1 SSIM at sigma=0, k_fb={_fmt_k(k)} >= 0.75", med, ">= 0.75 (reference ~0.9)", med >= 0.75)
    top = max(sigmas)
    if 0.0 in ks:
        levels = [0.0] + ([max(ks)] if max(ks) > 0 else [])
        chain = [("baseline", baseline[top])] + [(f"k_fb={_fmt_k(k)}", records[(top, k)][0]) for k in levels]
        meds = {name: float(np.median(v)) for name, v in chain}
        ok = True
        for (na, va), (nb, vb) in zip(chain, chain[1:]):
            s = _pair_test(vb, va)
            ok &= s is not None and sign_test_passes(s, expect_positive=True)
        run.verdict(f"layer-1 SSIM ordering at sigma={_fmt_k(top)}", meds,
                    " < ".join(n for n, _ in chain) + " (paired Wilcoxon p < 0.05)", ok)
        ref_vals = {"baseline": 0.02, "k_fb=0": 0.03, "k_fb=1": 0.05, "k_fb=4": 0.06}
        for name, med in meds.items():
            if name in ref_vals and top == 5.0:
                run.verdict(f"{name} SSIM at sigma=5 within 0.05 of {ref_vals[name]}", med,
                            f"{ref_vals[name]} ± 0.05", abs(med - ref_vals[name]) <= 0.05, informational=True)

    _render(lambda: _render_denoise(run.output("denoise_grid.png"), recon_example, sigmas, ks, L), "denoise grid")
    return run.finish()


def _render_denoise(path, examples, sigmas, ks, L):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shown = [s for s in sigmas if (s, "noisy") in examples]
    cols = 1 + len(ks) * L
    fig, axes = plt.subplots(len(shown), cols, figsize=(1.6 * cols, 1.6 * len(shown)), squeeze=False)
    for r, s in enumerate(shown):
        panels = [("noisy", examples[(s, "noisy")])]
        panels += [(f"L{l} k={_fmt_k(k)}", examples[(s, k, l)]) for k in ks for l in range(1, L + 1)]
        for c, (title, img) in enumerate(panels):
            ax = axes[r, c]
            ax.imshow(_display(img), cmap="gray" if img.shape[0] == 1 else None)
            ax.set_axis_off()
            ax.set_title(f"{title}\nσ={_fmt_k(s)}", fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _display(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=float)
    a = (a - a.min()) / (np.ptp(a) or 1.0)
    return a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)


# --------------------------------------------------------------------------
# Sparsity
# --------------------------------------------------------------------------


def cmd_sparsity(cfg: RunConfig) -> dict:
    run = CommandRun(cfg, "sparsity")
    prep = prepare_data(cfg)
    ckpt = load_model(cfg)
    run.add_input(cfg.checkpoint_path())
    test = eval_images(cfg, prep)
    x = test.tensor(ckpt.net.dtype)
    ks = cfg.k_fb_list()
    L = ckpt.net.n_layers
    fractions: dict[float, list[np.ndarray]] = {}
    for k in ks:
        per_layer = [np.zeros(len(x)) for _ in range(L)]

        def on_batch(start, gammas, per_layer=per_layer):
            for l, g in enumerate(gammas):
                for j in range(len(g)):
                    per_layer[l][start + j] = active_fraction(g[j])

        infer_all(ckpt.net.replace(k_fb=k), x, cfg.batch_size, run, on_batch)
        fractions[k] = per_layer
    rows = []
    with open(run.output("sparsity_records.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "k_fb"] + [f"active_fraction_layer{l}" for l in range(1, L + 1)])
        for k in ks:
            for n in range(len(x)):
                w.writerow([test.ids[n], _fmt_k(k)] + [f"{fractions[k][l][n]:.6g}" for l in range(L)])
    k_ref = ks[0]
    for k in ks:
        for l in range(L):
            summary = median_mad(fractions[k][l])
            if k != k_ref:
                t = _pair_test(fractions[k][l], fractions[k_ref][l])
                summary.p_value = None if t is None else t.p_value
            rows.append(StatRow(f"active_fraction_layer{l + 1}", _fmt_k(k), "", summary))
    write_stats_csv(run.output("stats.csv"), rows)
    if 0.0 in ks and 1.0 in ks:
        s = _pair_test(fractions[1.0][0], fractions[0.0][0])
        meds = {"k_fb=0": float(np.median(fractions[0.0][0])), "k_fb=1": float(np.median(fractions[1.0][0]))}
        run.verdict("layer-1 active fraction k_fb=1 > k_fb=0", {**meds, "p": None if s is None else s.p_value},
                    "increase, paired Wilcoxon p < 0.05", s is not None and sign_test_passes(s, True))
        run.verdict("active fraction increase (points)", 100 * (meds["k_fb=1"] - meds["k_fb=0"]),
                    "reference +8.7", True, informational=True)
    meds = [float(np.median(fractions[k][0])) for k in sorted(ks)]
    run.verdict("median layer-1 active fraction non-decreasing in k_fb", meds, "non-decreasing",
                all(b >= a for a, b in zip(meds, meds[1:])), informational=True)
    return run.finish()


# --------------------------------------------------------------------------
# Interaction maps
# --------------------------------------------------------------------------


def theta_centers(cfg: RunConfig, atlas) -> list[float]:
    """Central orientations in radians."""
    if cfg.theta_grid > 0:
        return list(np.deg2rad(np.arange(cfg.theta_grid) * 180.0 / cfg.theta_grid))
    return sorted(set(np.round(atlas.orientations, 12).tolist()))


def gabor_atlas(cfg: RunConfig, net: NetworkConfig, run: CommandRun) -> OrientationAtlas:
    """Fit every layer-1 atom, write the report, then build the atlas (may raise)."""
    atoms = effective_dictionary(net, 1).atoms.detach().cpu().numpy()
    fits = fit_atoms(atoms)
    kept = np.array([(not f.degenerate) and f.r2 >= cfg.r2_threshold for f in fits])
    write_atlas_csv(run.output("gabor_atlas.csv"),
                    OrientationAtlas(np.array([f.theta for f in fits]), kept, fits, cfg.r2_threshold))
    frac = float(kept.mean())
    run.verdict(f"fraction of layer-1 atoms with Gabor r2 >= {cfg.r2_threshold}", frac, ">= 0.5", frac >= 0.5)
    run.extra["gabor_retained"] = int(kept.sum())
    return build_atlas(fits, cfg.r2_threshold)


def cmd_maps(cfg: RunConfig) -> dict:
    run = CommandRun(cfg, "maps")
    prep = prepare_data(cfg)
    ckpt = load_model(cfg)
    run.add_input(cfg.checkpoint_path())
    try:
        atlas = gabor_atlas(cfg, ckpt.net, run)
    except Exception:
        run.finish()
        raise
    test = eval_images(cfg, prep)
    x = test.tensor(ckpt.net.dtype)
    R = cfg.map_radius
    ks = list(dict.fromkeys(cfg.k_fb_list()))
    k_ref = 0.0 if 0.0 in ks else ks[0]
    ks = [k_ref] + [k for k in ks if k != k_ref]
    thetas = theta_centers(cfg, atlas)
    feats = {tc: nearest_feature(atlas, tc, cfg.theta_tol) for tc in thetas}
    thetas = [tc for tc in thetas if feats[tc] is not None]
    if not thetas:
        raise ConfigurationError("no central orientation has a retained feature within tolerance")
    run.extra["theta_c_deg"] = [float(np.rad2deg(t)) for t in thetas]

    centers: dict[float, list[list[tuple[int, int]]]] = {}
    maps: dict[tuple[float, float], object] = {}
    marg_maps: dict[tuple[float, float], object] = {}
    counts: dict[tuple[float, float], int] = {}
    for k in ks:
        g1 = infer_all(ckpt.net.replace(k_fb=k), x, cfg.batch_size, run)[0]
        shuffled = [shuffle_positions(g1[n], np.random.default_rng([cfg.seed, n])) for n in range(len(g1))]
        for tc in thetas:
            if k == k_ref:
                centers[tc] = [select_centers(g1[n], feats[tc], R, cfg.top_k) for n in range(len(g1))]
            try:
                maps[(tc, k)], rep = aggregate_maps(list(g1), atlas, tc, k, R, cfg.top_k, cfg.theta_tol, centers[tc])
                counts[(tc, k)] = rep.n_maps
                marg_maps[(tc, k)], _ = aggregate_maps(shuffled, atlas, tc, k, R, cfg.top_k, cfg.theta_tol)
            except Exception as exc:  # noqa: BLE001
                logger.warning("theta_c=%.1f k_fb=%g skipped: %s", np.rad2deg(tc), k, exc)
        del g1, shuffled

    region_rows = []
    profiles = []
    per_theta: dict[float, dict[str, list]] = {}
    for tc in thetas:
        if (tc, k_ref) not in maps:
            continue
        mask = region_mask(tc, R)
        for k in ks:
            if (tc, k) not in maps:
                continue
            m, mm = maps[(tc, k)], marg_maps[(tc, k)]
            sub = os.path.join("maps", f"theta_{np.rad2deg(tc):07.3f}", f"kfb_{_fmt_k(k)}")
            write_map_csv(run.output(sub, "interaction_map.csv"), m, mask)
            col, cir = colinearity_deviation(m, tc, mask), cocircularity_deviation(m, tc, mask)
            mcol, mcir = colinearity_deviation(mm, tc, mask), cocircularity_deviation(mm, tc, mask)
            ra_grid = None
            if k != k_ref:
                ra_grid, _ = activity_ratio(m, maps[(tc, k_ref)])
                prof = axis_profile(ra_grid, tc)
                profiles += [(np.rad2deg(tc), k, d, v) for d, v in enumerate(prof)]
            for region in REGIONS:
                ra = float("nan")
                if ra_grid is not None:
                    vals = ra_grid[mask == region]
                    vals = vals[np.isfinite(vals)]
                    ra = float(np.median(vals)) if vals.size else float("nan")
                r_col = precision_ratio(mcol[region], col[region]).value
                r_cir = precision_ratio(mcir[region], cir[region]).value
                region_rows.append([np.rad2deg(tc), k, region, col[region], cir[region], mcol[region],
                                    mcir[region], r_col, r_cir, ra, counts[(tc, k)]])
                d = per_theta.setdefault((k, region), {"col": [], "mcol": [], "cir": [], "mcir": [], "ra": []})
                d["col"].append(col[region])
                d["mcol"].append(mcol[region])
                d["cir"].append(cir[region])
                d["mcir"].append(mcir[region])
                d["ra"].append(ra)

    with open(run.output("region_stats.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta_c_deg", "k_fb", "region", "colin_dev", "cocir_dev", "marginal_colin_dev",
                    "marginal_cocir_dev", "r_colin", "r_cocir", "activity_ratio", "n_maps"])
        for r in region_rows:
            w.writerow([f"{r[0]:.6g}", _fmt_k(r[1]), r[2]] + [f"{v:.6g}" for v in r[3:10]] + [r[10]])
    with open(run.output("axis_profile.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta_c_deg", "k_fb", "distance", "activity_ratio"])
        for tcd, k, d, v in profiles:
            w.writerow([f"{tcd:.6g}", _fmt_k(k), d, f"{v:.6g}"])

    rows = []
    results: dict[tuple[float, str], dict[str, StatSummary | None]] = {}
    for (k, region), d in sorted(per_theta.items(), key=lambda kv: (kv[0][0], REGIONS.index(kv[0][1]))):
        col, mcol = np.array(d["col"]), np.array(d["mcol"])
        cir, mcir = np.array(d["cir"]), np.array(d["mcir"])
        ok_c = np.isfinite(col) & np.isfinite(mcol) & (col > 0)
        ok_q = np.isfinite(cir) & np.isfinite(mcir) & (cir > 0)
        for name, dev, mdev, ok in (("colin", col, mcol, ok_c), ("cocir", cir, mcir, ok_q)):
            if region == CENTER:
                continue
            s = median_mad(mdev[ok] / dev[ok])
            t = _pair_test(mdev[ok], dev[ok])
            s.p_value = None if t is None else t.p_value
            results[(k, f"r_{name}_{region}")] = {"summary": s, "test": t}
            rows.append(StatRow(f"r_{name}_{region}", _fmt_k(k), "", s))
            rows.append(StatRow(f"{name}_dev_{region}", _fmt_k(k), "", median_mad(dev[ok])))
            rows.append(StatRow(f"marginal_{name}_dev_{region}", _fmt_k(k), "", median_mad(mdev[ok])))
        if k != k_ref:
            ra = np.array(d["ra"])
            ra = ra[np.isfinite(ra)]
            s = median_mad(ra)
            t = _pair_test(ra, np.ones_like(ra))
            s.p_value = None if t is None else t.p_value
            results[(k, f"activity_ratio_{region}")] = {"summary": s, "test": t}
            rows.append(StatRow(f"activity_ratio_{region}", _fmt_k(k), "", s))
    write_stats_csv(run.output("stats.csv"), rows)

    if k_ref == 0.0 and (0.0, f"r_colin_{END}") in results:
        r = results[(0.0, f"r_colin_{END}")]
        run.verdict("end-zone co-linearity precision ratio at k_fb=0 > 1", _summary_obs(r),
                    "> 1, paired Wilcoxon p < 0.05 (reference 43/9 = 4.78)",
                    r["summary"].median > 1 and r["test"] is not None and sign_test_passes(r["test"], True))
    if k_ref == 0.0 and 1.0 in ks:
        for region, up in ((END, True), (CENTER, False), (SIDE, False)):
            key = (1.0, f"activity_ratio_{region}")
            if key not in results:
                continue
            r = results[key]
            med_ok = r["summary"].median > 1 if up else r["summary"].median < 1
            run.verdict(f"{region} activity ratio at k_fb=1 {'>' if up else '<'} 1", _summary_obs(r),
                        f"{'>' if up else '<'} 1, Wilcoxon p < 0.05",
                        med_ok and r["test"] is not None and sign_test_passes(r["test"], up))
    _render(lambda: _render_maps(run, maps, thetas, ks, R), "interaction maps")
    return run.finish()


def _summary_obs(r) -> dict:
    s, t = r["summary"], r["test"]
    return {"median": _finite_or_none(s.median), "mad": _finite_or_none(s.mad), "n": s.n,
            "p": None if t is None else t.p_value}


def _render_maps(run: CommandRun, maps, thetas, ks, R):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shown = thetas[:6]
    fig, axes = plt.subplots(len(shown), len(ks), figsize=(2.2 * len(ks), 2.2 * len(shown)), squeeze=False)
    rows, cols = np.mgrid[0:2 * R + 1, 0:2 * R + 1]
    for i, tc in enumerate(shown):
        for j, k in enumerate(ks):
            ax = axes[i, j]
            ax.set_axis_off()
            if (tc, k) not in maps:
                continue
            m = maps[(tc, k)]
            mag, th = m.magnitude, m.theta_bar
            ax.imshow(mag, cmap="viridis")
            ax.quiver(cols, rows, np.cos(th), -np.sin(th), pivot="middle", headwidth=0, headlength=0,
                      headaxislength=0, color="w", scale=12)
            ax.set_title(f"θc={np.rad2deg(tc):.0f}° k={_fmt_k(k)}", fontsize=7)
    fig.tight_layout()
    fig.savefig(run.output("interaction_maps.png"), dpi=100)
    plt.close(fig)


# --------------------------------------------------------------------------
# Receptive fields
# --------------------------------------------------------------------------


def activation_probability(gammas: np.ndarray) -> np.ndarray:
    """Fraction of images whose maximum coefficient for each atom is positive."""
    return (gammas.reshape(gammas.shape[0], gammas.shape[1], -1).max(axis=2) > 0).mean(axis=0)


def mosaic(atoms: np.ndarray, order: Sequence[int], gap: int = 1) -> np.ndarray:
    """Tile atoms (each min-max normalized) into an 8-bit ``[H, W(, 3)]`` image."""
    F, C, kh, kw = atoms.shape
    cols = int(math.ceil(math.sqrt(len(order))))
    rows = int(math.ceil(len(order) / cols))
    out = np.full((rows * (kh + gap) + gap, cols * (kw + gap) + gap, C), 255, dtype=np.uint8)
    for n, f in enumerate(order):
        a = atoms[f].transpose(1, 2, 0).astype(np.float64)
        a = (a - a.min()) / (np.ptp(a) or 1.0)
        r, c = divmod(n, cols)
        y, x = gap + r * (kh + gap), gap + c * (kw + gap)
        out[y:y + kh, x:x + kw] = np.round(255 * a).astype(np.uint8)
    return out[..., 0] if C == 1 else out


def cmd_show_rfs(cfg: RunConfig) -> dict:
    from PIL import Image

    run = CommandRun(cfg, "show-rfs")
    ckpt = load_model(cfg)
    run.add_input(cfg.checkpoint_path())
    net = ckpt.net
    probs = [np.zeros(l.dictionary.n_features) for l in net.layers]
    if cfg.probe_images > 0 and cfg.data_dir:
        prep = prepare_data(cfg)
        probe = prep.test.subset(np.arange(min(cfg.probe_images, len(prep.test))))
        gammas = infer_all(net, probe.tensor(net.dtype), cfg.batch_size, run)
        probs = [activation_probability(g) for g in gammas]
    with open(run.output("rf_ranking.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "rank", "feature", "activation_probability", "tile_h", "tile_w"])
        for i in range(1, net.n_layers + 1):
            eff = effective_dictionary(net, i).atoms.detach().cpu().numpy()
            order = np.argsort(-probs[i - 1], kind="stable")
            for rank, f in enumerate(order):
                w.writerow([i, rank, int(f), f"{probs[i - 1][f]:.6g}", eff.shape[2], eff.shape[3]])
            Image.fromarray(mosaic(eff, order)).save(run.output(f"rf_layer{i}.png"))
            run.extra[f"layer{i}_tile"] = [int(eff.shape[2]), int(eff.shape[3])]
    return run.finish()


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "maps": cmd_maps,
    "sparsity": cmd_sparsity,
    "show-rfs": cmd_show_rfs,
}
