"""Experiment commands: phantom generation, training, denoising, evaluation, ablation.

Each command reads only its config and input files and writes only to its
output location.  Every written artifact is accompanied by the config hash
(inside checkpoints and reports, or in a JSON sidecar next to volumes).
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig
from .controlnet import (
    ControlledPredictor,
    identity_self_test,
    init_from_backbone,
    load_branch,
    save_branch,
    train_controlnet,
)
from .diffusion import NoiseSchedule, sample
from .errors import IntegrityError, ParameterError, ShapeError
from .network.checkpoint import load_checkpoint, save_checkpoint
from .network.unet import UNetConfig, UNetPredictor, init_unet
from .phantom import generate_phantom, random_phantom_spec, simulate_low_dose
from .training import PatchDataset, fit, smooth
from .volume import NormStats, Volume, denormalize, extract_patches, normalize, read_volume, stitch_patches, write_volume
from .wavelet import SubbandSelector, wavelet_prior

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
ABLATION_LABELS = {"none": "Baseline", "LLL": "A1", "HHH": "A2", "AllHigh": "A3", "AllLow": "A4", "AllBands": "A5"}


def dose_label(fraction: float) -> str:
    f = Fraction(fraction).limit_denominator(1000)
    return f"{f.numerator}/{f.denominator}"


def dose_dir(fraction: float) -> str:
    return "dose_" + dose_label(fraction).replace("/", "-")


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_volume(vol: Volume, path: Path, sidecar: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_volume(vol, path)
    _write_json(path.with_suffix(".json"), sidecar)


def _case_id(i: int) -> str:
    return f"case{i:03d}"


# ------------------------------------------------------------------- phantoms


def cmd_phantom_gen(cfg: RunConfig, out_dir=None) -> dict:
    """Clean phantoms plus low-dose versions: train split at the training dose, test split at every test dose."""
    d = cfg.data
    root = Path(out_dir or cfg.paths.data_dir)
    manifest = {"config_hash": cfg.hash(), "dims": list(d.dims), "counts_per_unit": d.counts_per_unit,
                "noise_model": d.noise_model, "splits": {}}
    for split, base_seed, n, doses in (("train", d.train_seed, d.n_train, (d.train_dose,)),
                                       ("test", d.test_seed, d.n_test, d.test_doses)):
        cases = []
        for i in range(n):
            seed = base_seed + i
            spec = random_phantom_spec(d.dims, seed, (d.ellipsoids_min, d.ellipsoids_max),
                                       (d.uptake_min, d.uptake_max), d.bias_amplitude, d.blur_sigma)
            clean = generate_phantom(spec)
            cid = _case_id(i)
            _write_volume(clean, root / split / "clean" / f"{cid}.vxv", {"config_hash": cfg.hash(), "seed": seed})
            entry = {"id": cid, "seed": seed, "spec": spec.to_dict(), "doses": {}}
            for dose in doses:
                low = simulate_low_dose(clean, dose, d.counts_per_unit, seed, d.noise_model)
                rel = Path(split) / dose_dir(dose) / f"{cid}.vxv"
                _write_volume(low, root / rel, {"config_hash": cfg.hash(), "seed": seed, "dose": dose_label(dose)})
                entry["doses"][dose_label(dose)] = str(rel)
            entry["clean"] = str(Path(split) / "clean" / f"{cid}.vxv")
            cases.append(entry)
        manifest["splits"][split] = cases
        log.info("generated %d %s cases", n, split)
    _write_json(root / MANIFEST, manifest)
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    return json.loads(path.read_text())


def load_split(data_dir, split: str, dose: float):
    """(case ids, clean volumes, low-dose volumes) for one split and dose."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    label = dose_label(dose)
    ids, clean, low = [], [], []
    for case in manifest["splits"][split]:
        if label not in case["doses"]:
            raise ParameterError(f"dose {label} not generated for split {split}")
        ids.append(case["id"])
        clean.append(read_volume(root / case["clean"]))
        low.append(read_volume(root / case["doses"][label]))
    return ids, clean, low


# ------------------------------------------------------------------- training


def _training_data(cfg: RunConfig, data_dir, selector=None, dose=None):
    _, clean, low = load_split(data_dir, "train", cfg.data.train_dose if dose is None else dose)
    norm = NormStats.from_reference(clean, cfg.volume.norm_percentile)
    dataset = PatchDataset([normalize(c, norm) for c in clean], [normalize(y, norm) for y in low],
                           cfg.volume.patch_size, selector, cfg.control.combine)
    return dataset, norm


def _write_losses(path: Path, losses, cfg_hash: str) -> None:
    sm = smooth(losses)
    lines = [f"# config_hash {cfg_hash}", "step,loss,smoothed"]
    lines += [f"{i + 1},{l!r},{s!r}" for i, (l, s) in enumerate(zip(losses, sm))]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def loss_log_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.stem + ".loss.csv")


@dataclass
class TrainResult:
    path: Path
    losses: list
    start_loss: float
    end_loss: float


def _result(path, losses) -> TrainResult:
    sm = smooth(losses)
    return TrainResult(Path(path), losses, float(sm[min(len(sm), 50) - 1]), float(sm[-1]))


def cmd_train_backbone(cfg: RunConfig, out_path, data_dir=None, T: int | None = None,
                       steps: int | None = None) -> TrainResult:
    """Fit the unconditioned-prior backbone and write its checkpoint (normalization stats included)."""
    data_dir = data_dir or cfg.paths.data_dir
    dataset, norm = _training_data(cfg, data_dir)
    sched = cfg.schedule(T)
    ucfg = cfg.unet_config()
    store = init_unet(ucfg, cfg.network.init_seed)
    hyper = cfg.train_hyper("train", steps)
    losses = fit(UNetPredictor(store, ucfg, sched.T), store, dataset, sched, hyper, use_prior=False)
    extra = {"config_hash": cfg.hash(), "steps": hyper.steps}
    save_checkpoint(store, ucfg, sched, out_path, norm=norm, kind="backbone", extra=extra)
    _write_losses(loss_log_path(out_path), losses, cfg.hash())
    res = _result(out_path, losses)
    log.info("backbone: smoothed loss %.5f -> %.5f", res.start_loss, res.end_loss)
    return res


@dataclass
class LoadedModel:
    backbone: object
    cfg: UNetConfig
    sched: NoiseSchedule
    norm: NormStats
    branch: object = None
    selector: SubbandSelector | None = None

    def predictor(self):
        if self.branch is None:
            return UNetPredictor(self.backbone, self.cfg, self.sched.T)
        return ControlledPredictor(self.backbone, self.branch, self.sched.T)


def load_backbone(path) -> LoadedModel:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "backbone":
        raise IntegrityError(f"{path} is not a backbone checkpoint (kind={ckpt.kind!r})")
    if ckpt.norm is None:
        raise IntegrityError(f"{path} carries no normalization statistics")
    ckpt.store.freeze()
    return LoadedModel(ckpt.store, UNetConfig(**ckpt.config), NoiseSchedule.from_dict(ckpt.schedule),
                       NormStats(ckpt.norm["lo"], ckpt.norm["hi"]))


def load_model(backbone_path, branch_path=None) -> LoadedModel:
    model = load_backbone(backbone_path)
    if branch_path is not None:
        branch, ckpt = load_branch(branch_path, model.backbone)
        if NoiseSchedule.from_dict(ckpt.schedule).T != model.sched.T:
            raise IntegrityError("branch and backbone schedules differ")
        model.branch = branch
        model.selector = SubbandSelector.parse(ckpt.extra["selector"])
    return model


def cmd_train_control(cfg: RunConfig, backbone_path, out_path, data_dir=None, selector=None,
                      steps: int | None = None) -> TrainResult:
    """Train the control branch on a frozen backbone.

    The identity-at-initialization self-test runs and is logged before any
    optimizer step; a nonzero difference aborts with an integrity error.
    """
    data_dir = data_dir or cfg.paths.data_dir
    selector = selector or cfg.selector()
    model = load_backbone(backbone_path)
    channels = len(selector.mask) if cfg.control.combine == "stack" else 1
    branch = init_from_backbone(model.backbone, model.cfg, prior_channels=channels,
                                inject_middle=cfg.control.inject_middle, seed=cfg.control.seed)
    diff = identity_self_test(model.backbone, branch, model.sched.T, cfg.volume.patch_size,
                              cfg.control.self_test_trials, cfg.control.seed)
    log.info("identity-at-init self-test: max |controlled - backbone| = %r", diff)
    if diff != 0.0:
        raise IntegrityError(f"control branch is not inactive at initialization (max diff {diff})")
    dataset, _ = _training_data(cfg, data_dir, selector)
    hyper = cfg.train_hyper("control", steps)
    losses = train_controlnet(model.backbone, branch, dataset, model.sched, hyper, cfg.control.check_every)
    log.info("backbone checksum verified unchanged: %s", branch.backbone_checksum[:16])
    extra = {"config_hash": cfg.hash(), "steps": hyper.steps, "selector": selector.name,
             "combine": cfg.control.combine, "self_test_max_diff": diff}
    save_branch(branch, model.sched, out_path, model.norm, extra)
    _write_losses(loss_log_path(out_path), losses, cfg.hash())
    res = _result(out_path, losses)
    log.info("control (%s): smoothed loss %.5f -> %.5f", selector.name, res.start_loss, res.end_loss)
    return res


# ------------------------------------------------------------------ denoising


def patch_seeds(seed: int, case_id: str, n: int) -> list[int]:
    """Independent per-patch sampling seeds derived from (seed, case id)."""
    ss = np.random.SeedSequence([seed, zlib.crc32(case_id.encode())])
    return [int(s) for s in ss.generate_state(n, dtype=np.uint32)]


def denoise_volume(model: LoadedModel, low: Volume, cfg: RunConfig, case_id: str,
                   selector: SubbandSelector | None = None) -> Volume:
    """Normalize, patch, sample every patch conditioned on it (and its wavelet prior), stitch, denormalize."""
    p = cfg.volume.patch_size
    y = normalize(low, model.norm)
    grid, patches = extract_patches(y, p, cfg.volume.overlap)
    Y = np.stack([q.data for q in patches])[:, None]
    C = None
    if model.branch is not None:
        selector = selector or cfg.selector()
        combine = "stack" if model.branch.prior_channels > 1 else "mean"
        C = np.stack([wavelet_prior(q.data, selector, combine) for q in patches])
    clip = (-1.0, 1.0) if cfg.diffusion.clip else None
    X = sample(model.predictor(), Y, C, model.sched, patch_seeds(cfg.sample.seed, case_id, len(patches)), clip=clip)
    out = stitch_patches(grid, list(X[:, 0]), low.dims)
    return denormalize(out, model.norm, low.unit)


def cmd_denoise(cfg: RunConfig, backbone_path, inputs, output, branch_path=None) -> list[Path]:
    """Denoise one VXV1 file into `output`, or every ``*.vxv`` of a directory into the directory `output`."""
    model = load_model(backbone_path, branch_path)
    selector = model.selector
    src = Path(inputs)
    if src.is_dir():
        files = sorted(src.glob("*.vxv"))
        if not files:
            raise FileNotFoundError(f"no .vxv volumes in {src}")
        targets = [Path(output) / f.name for f in files]
    else:
        files, targets = [src], [Path(output)]
    written = []
    for f, target in zip(files, targets):
        vol = read_volume(f)
        den = denoise_volume(model, vol, cfg, f.stem, selector)
        _write_volume(den, target, {"config_hash": cfg.hash(), "source": f.name, "sample_seed": cfg.sample.seed,
                                    "selector": None if selector is None else selector.name})
        log.info("denoised %s -> %s", f.name, target)
        written.append(target)
    return written


# ----------------------------------------------------------------- evaluation


def _paired_files(pred_dir, ref_dir):
    preds = sorted(Path(pred_dir).glob("*.vxv"))
    if not preds:
        raise FileNotFoundError(f"no .vxv volumes in {pred_dir}")
    refs = [Path(ref_dir) / p.name for p in preds]
    for r in refs:
        if not r.exists():
            raise FileNotFoundError(f"reference {r} missing")
    return preds, refs


def evaluate_dir(cfg: RunConfig, name: str, pred_dir, ref_dir) -> metrics.MetricReport:
    preds, refs = _paired_files(pred_dir, ref_dir)
    pv = [read_volume(p) for p in preds]
    rv = [read_volume(r) for r in refs]
    for p, r in zip(pv, rv):
        if p.dims != r.dims:
            raise ShapeError(f"prediction {p.dims} and reference {r.dims} differ")
    report = metrics.evaluate_cases(name, pv, rv, [p.stem for p in preds], ssim_window=cfg.eval.ssim_window)
    report.meta["config_hash"] = cfg.hash()
    return report


def write_report(report: metrics.MetricReport, out_dir, stem: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    (out / f"{stem}.txt").write_text(report.table() + "\n")


def cmd_eval(cfg: RunConfig, pred_dir, ref_dir, out_dir, comparator_dir=None, name: str = "method") -> metrics.MetricReport:
    """Per-case metrics for `pred_dir` against `ref_dir`, paired-tested against `comparator_dir` if given."""
    report = evaluate_dir(cfg, name, pred_dir, ref_dir)
    if comparator_dir is not None:
        comp = evaluate_dir(cfg, cfg.eval.comparator, comparator_dir, ref_dir)
        metrics.compare(report, comp)
        write_report(comp, out_dir, "comparator")
    write_report(report, out_dir, "report")
    return report


# ------------------------------------------------------------------- ablation


def ablation_table(reports: dict) -> str:
    head = f"{'Setting':<10}{'Freq.':<10}{'PSNR':>10}{'SSIM':>10}{'GMSD':>10}{'NMAE':>10}"
    rows = [head, "-" * len(head)]
    for sel, rep in reports.items():
        agg = rep.aggregates
        label = ABLATION_LABELS.get(sel, sel)
        flags = rep.flags()
        cells = "".join(f"{_cell(agg[m]['mean'], flags.get(m, '')):>10}" for m in metrics.METRICS)
        rows.append(f"{label:<10}{'--' if sel == 'none' else sel:<10}{cells}")
    return "\n".join(rows)


def _cell(mean, flag):
    return "inf" if mean is None else f"{mean:.4f}{flag}"


def best_setting(reports: dict, metric: str = "psnr") -> str:
    sign = 1 if metrics.HIGHER_IS_BETTER[metric] else -1
    scored = {s: r.aggregates[metric]["mean"] for s, r in reports.items() if r.aggregates[metric]["mean"] is not None}
    return max(scored, key=lambda s: sign * scored[s])


def cmd_ablate(cfg: RunConfig, out_dir=None, data_dir=None, backbone_path=None) -> dict:
    """One report per selector (baseline = backbone alone) on the same cases, seeds and backbone.

    Every conditioned setting is paired-tested against the baseline with
    Holm adjustment across the four metrics.
    """
    data_dir = Path(data_dir or cfg.paths.data_dir)
    out = Path(out_dir or Path(cfg.paths.out_dir) / "ablate")
    a = cfg.ablate
    if backbone_path is None:
        backbone_path = out / "backbone.vxc"
        cmd_train_backbone(cfg, backbone_path, data_dir, T=a.T, steps=a.backbone_steps)
    ids, clean, low = load_split(data_dir, "test", a.dose)
    low_dir = data_dir / "test" / dose_dir(a.dose)
    ref_dir = data_dir / "test" / "clean"
    reports, seeds = {}, {}
    for sel_name in a.selectors:
        key = "none" if sel_name.lower() == "none" else SubbandSelector.parse(sel_name).name
        branch_path = None
        if key != "none":
            branch_path = out / f"branch_{key}.vxc"
            cmd_train_control(cfg, backbone_path, branch_path, data_dir, SubbandSelector.parse(key), a.control_steps)
        pred_dir = out / f"denoised_{key}"
        cmd_denoise(cfg, backbone_path, low_dir, pred_dir, branch_path)
        reports[key] = evaluate_dir(cfg, key, pred_dir, ref_dir)
        reports[key].meta.update({"selector": key, "sample_seed": cfg.sample.seed, "cases": ids})
        seeds[key] = cfg.sample.seed
    if "none" in reports:
        for key, rep in reports.items():
            if key != "none":
                metrics.compare(rep, reports["none"])
    for key, rep in reports.items():
        write_report(rep, out, f"report_{key}")
    table = ablation_table(reports)
    best = best_setting(reports)
    summary = table + f"\nbest PSNR setting: {ABLATION_LABELS.get(best, best)} ({best})\n"
    (out / "ablation.txt").write_text(summary)
    _write_json(out / "ablation.json", {"config_hash": cfg.hash(), "best_psnr": best, "sample_seeds": seeds,
                                         "settings": {k: ABLATION_LABELS.get(k, k) for k in reports}})
    log.info("ablation summary\n%s", summary)
    return reports
