"""End-to-end stages: data, checkpoints, evaluation and report emission."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import analysis, frequency
from .archive import load_archive, save_archive
from .attacks import AttackConfig, attack_defended, run_attack, within_budget
from .config import RunConfig, dump_config
from .data import Dataset, load_cifar10, synthetic_dataset
from .defense import (DefendedPipeline, PromptBank, extract_cluster_features, fit_clusters,
                      train_prompts)
from .model import MAE, Encoder, ViTClassifier, ViTConfig, classifier_from_mae
from .pretrain import finetune_supervised, pretrain_mae

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- io helpers

def atomic_write(path, payload: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def git_blob_hash(payload: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _png(array, cmap="viridis") -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    buf = io.BytesIO()
    plt.imsave(buf, array, cmap=cmap, format="png")
    return buf.getvalue()


def _curve_png(xs, ys, xlabel, ylabel) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png")
    plt.close(fig)
    return buf.getvalue()


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- data

def load_data(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "cifar10":
        data = load_cifar10(d.path)
    elif d.source == "synthetic":
        data = synthetic_dataset(d.synthetic_train, d.synthetic_test, seed=cfg.seed)
    else:
        raise ValueError(f"unsupported data source {d.source!r}")
    return data.limit(d.train_limit, d.test_limit)


def data_inputs(cfg: RunConfig) -> dict[str, str]:
    """Content hashes of the dataset files a run reads."""
    if cfg.data.source != "cifar10":
        return {"synthetic": f"seed={cfg.seed},n={cfg.data.synthetic_train}+{cfg.data.synthetic_test}"}
    root = Path(cfg.data.path)
    return {p.name: git_blob_hash(p.read_bytes()) for p in sorted(root.glob("*.bin"))}


# ---------------------------------------------------------------- checkpoints

_CFG_FIELDS = [f for f in ViTConfig.__dataclass_fields__]


def save_model(path, model: torch.nn.Module, extra_meta: dict | None = None) -> None:
    meta = {f"cfg.{k}": float(getattr(model.cfg, k)) for k in _CFG_FIELDS}
    meta.update(extra_meta or {})
    save_archive(path, {k: v.float() for k, v in model.state_dict().items()}, meta)


def _cfg_from_meta(meta) -> ViTConfig:
    kw = {}
    for k in _CFG_FIELDS:
        v = meta[f"cfg.{k}"]
        kw[k] = v if k == "mlp_ratio" else int(v)
    return ViTConfig(**kw)


def load_model(path, kind: str = "classifier"):
    tensors, meta = load_archive(path)
    cfg = _cfg_from_meta(meta)
    if kind == "classifier":
        model = ViTClassifier(cfg)
    elif kind == "mae":
        model = MAE(cfg)
    elif kind == "encoder":
        model = Encoder(cfg)
        tensors = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
    else:
        raise ValueError(kind)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


def save_bank(path, bank: PromptBank) -> None:
    save_archive(path, {"prototypes": bank.prototypes.float(), "prompts": bank.prompts},
                 {"radius": bank.radius, "lambda": bank.lam, "n": bank.n})


def load_bank(path) -> PromptBank:
    tensors, meta = load_archive(path)
    return PromptBank(tensors["prototypes"], tensors["prompts"], meta["radius"], meta["lambda"])


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalRow:
    model: str
    defense: str
    attack: str
    norm: str
    epsilon: float
    clean_acc: float
    robust_acc: float
    samples: int
    wall_time: float = 0.0

    def __post_init__(self):
        if not (0 <= self.clean_acc <= 100 and 0 <= self.robust_acc <= 100):
            raise ValueError("accuracies must lie in [0, 100]")
        if self.samples <= 0:
            raise ValueError("sample count must be > 0")


CSV_HEADER = ["model", "defense", "attack", "norm", "epsilon", "clean_acc", "robust_acc", "samples"]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def to_csv(self) -> str:
        """CSV without wall time, so identical runs give identical bytes."""
        return _csv(CSV_HEADER, [
            [r.model, r.defense, r.attack, r.norm, f"{r.epsilon:.8g}", f"{r.clean_acc:.4f}",
             f"{r.robust_acc:.4f}", r.samples]
            for r in self.rows
        ])

    def summary(self) -> str:
        lines = [f"{'model':<12}{'defense':<13}{'attack':<6}{'norm':<6}{'eps':>10}{'clean':>9}{'robust':>9}"
                 f"{'n':>7}{'secs':>9}"]
        for r in self.rows:
            lines.append(f"{r.model:<12}{r.defense:<13}{r.attack:<6}{r.norm:<6}{r.epsilon:>10.5f}"
                         f"{r.clean_acc:>9.2f}{r.robust_acc:>9.2f}{r.samples:>7}{r.wall_time:>9.2f}")
        return "\n".join(lines) + "\n"


@torch.no_grad()
def predict(predictor, images, batch_size=256) -> torch.Tensor:
    return torch.cat([predictor(images[i : i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)])


def evaluate(predictor, images, labels, attacks: list[AttackConfig], model_id: str = "model",
             defense_id: str = "none", seed: int = 0, batch_size: int = 100,
             keep: dict | None = None) -> EvalReport:
    """Clean accuracy plus robust accuracy under each attack.

    Defended pipelines are attacked end-to-end through their ensemble logits.
    When ``keep`` is a dict, adversarial batches are stored in it keyed by the
    attack label.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    attack_fn = attack_defended if isinstance(predictor, DefendedPipeline) else run_attack
    clean = (predict(predictor, images, batch_size) == labels).float().mean().item() * 100
    report = EvalReport()
    for cfg in attacks:
        t0 = time.perf_counter()
        correct = 0
        advs = []
        for bi, i in enumerate(range(0, len(images), batch_size)):
            xb, yb = images[i : i + batch_size], labels[i : i + batch_size]
            batch = attack_fn(predictor, xb, yb, cfg, seed=seed * 100003 + bi)
            if cfg.kind != "cw" and not within_budget(batch, cfg.norm, cfg.epsilon):
                raise AssertionError(f"{cfg.label}: adversarial outside budget in batch {bi}")
            correct += (predict(predictor, batch.adversarials, batch_size) == yb).sum().item()
            if keep is not None:
                advs.append(batch.adversarials)
        if keep is not None:
            keep[cfg.label] = torch.cat(advs)
        report.rows.append(EvalRow(model_id, defense_id, cfg.kind, cfg.norm, cfg.epsilon, clean,
                                   100.0 * correct / len(images), len(images), time.perf_counter() - t0))
        log.info("%s %s %s: robust %.2f", model_id, defense_id, cfg.label, report.rows[-1].robust_acc)
    return report


def report_emit(report: EvalReport, artifacts: dict, out_dir, config: RunConfig | None = None,
                inputs: dict | None = None, name: str = "report") -> list[Path]:
    """Write CSV tables, raster images and a run manifest into ``out_dir``.

    Artifacts may be (H, W) heatmap tensors, lists of (x, y) curve points,
    :class:`CKAMap`, :class:`DeviationCurve` or plain scalars.
    """
    if not report.rows and not artifacts:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    written = []
    if report.rows:
        written.append(atomic_write(out / f"{name}.csv", report.to_csv()))
        written.append(atomic_write(out / f"{name}.txt", report.summary()))
    scalars = {}
    for key, art in artifacts.items():
        if isinstance(art, analysis.CKAMap):
            rows = [[lab] + [f"{v:.6f}" for v in row.tolist()] for lab, row in zip(art.row_labels, art.values)]
            written.append(atomic_write(out / f"{key}.csv", _csv(["layer"] + list(art.col_labels), rows)))
            written.append(atomic_write(out / f"{key}.png", _png(art.values.numpy(), "magma")))
        elif isinstance(art, analysis.DeviationCurve):
            rows = [[i, f"{v:.6f}"] for i, v in enumerate(art.values)]
            written.append(atomic_write(out / f"{key}.csv", _csv(["layer", art.metric], rows)))
            written.append(atomic_write(out / f"{key}.png",
                                        _curve_png(range(len(art.values)), art.values, "layer", art.metric)))
        elif isinstance(art, torch.Tensor) and art.dim() == 2:
            rows = [[f"{v:.6g}" for v in row] for row in art.tolist()]
            written.append(atomic_write(out / f"{key}.csv", _csv([f"c{j}" for j in range(art.shape[1])], rows)))
            written.append(atomic_write(out / f"{key}.png", _png(art.detach().numpy())))
        elif isinstance(art, torch.Tensor) and art.dim() == 3:
            written.append(atomic_write(out / f"{key}.png", _png(art.permute(1, 2, 0).clamp(0, 1).numpy())))
        elif isinstance(art, list):
            rows = [[f"{x:.6g}", f"{y:.4f}"] for x, y in art]
            written.append(atomic_write(out / f"{key}.csv", _csv(["x", "y"], rows)))
            written.append(atomic_write(out / f"{key}.png",
                                        _curve_png([p[0] for p in art], [p[1] for p in art], "radius", "accuracy")))
        else:
            scalars[key] = art
    summary = {
        "rows": [{**r.__dict__} for r in report.rows],
        "scalars": scalars,
    }
    written.append(atomic_write(out / f"{name}_summary.json", json.dumps(summary, indent=2, default=float)))
    manifest = {
        "config": config.to_dict() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "inputs": inputs or {},
        "outputs": {p.name: git_blob_hash(p.read_bytes()) for p in written if p.suffix == ".csv"},
    }
    written.append(atomic_write(out / f"{name}_manifest.json",
                                json.dumps(manifest, indent=2, sort_keys=True, default=str)))
    return written


# ---------------------------------------------------------------- stages

def _ckpt(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) / name


def _checkpoint_inputs(cfg, *names):
    out = {}
    for n in names:
        p = _ckpt(cfg, n)
        if p.exists():
            out[n] = git_blob_hash(p.read_bytes())
    return out


def stage_pretrain(cfg: RunConfig) -> dict:
    data = load_data(cfg)
    torch.manual_seed(cfg.seed)
    mae = MAE(cfg.model)
    feat_model = None
    if cfg.pretrain.perceptual_weight > 0:
        path = cfg.pretrain.perceptual_checkpoint
        if not path:
            raise ValueError("perceptual_weight > 0 needs pretrain.perceptual_checkpoint")
        feat_model, _ = load_model(path, "classifier")
    history = pretrain_mae(mae, data.train_images, cfg.pretrain, seed=cfg.seed, feat_model=feat_model)
    save_model(_ckpt(cfg, "mae.rmae"), mae)
    atomic_write(_ckpt(cfg, "pretrain_history.json"), json.dumps(history, indent=2))
    return {"final_loss": history[-1] if history else None}


def stage_finetune(cfg: RunConfig) -> dict:
    data = load_data(cfg)
    torch.manual_seed(cfg.seed)
    mae_path = _ckpt(cfg, "mae.rmae")
    if mae_path.exists():
        mae, _ = load_model(mae_path, "mae")
        model = classifier_from_mae(mae, data.num_classes)
    else:
        warnings.warn(f"{mae_path} missing; finetuning from random initialization")
        model = ViTClassifier(cfg.model)
    finetune_supervised(model, data.train_images, data.train_labels, cfg.finetune, seed=cfg.seed,
                        eval_set=(data.test_images, data.test_labels))
    save_model(_ckpt(cfg, "classifier.rmae"), model, {"clean_acc": model.clean_accuracy})
    atomic_write(_ckpt(cfg, "finetune_history.json"), json.dumps(model.history, indent=2))
    return {"clean_acc": model.clean_accuracy}


def _eval_split(cfg, data):
    n = min(cfg.eval.samples, len(data.test_images))
    return data.test_images[:n], data.test_labels[:n]


def stage_attack(cfg: RunConfig) -> dict:
    data = load_data(cfg)
    model, _ = load_model(_ckpt(cfg, "classifier.rmae"))
    x, y = _eval_split(cfg, data)
    keep = {}
    report = evaluate(model, x, y, cfg.attacks, "classifier", "none", cfg.seed, cfg.eval.batch_size, keep)
    for label, adv in keep.items():
        save_archive(_ckpt(cfg, f"adv/{label}.rmae"),
                     {"originals": x, "adversarials": adv, "labels": y.double()})
    report_emit(report, {}, cfg.out, cfg, {**data_inputs(cfg), **_checkpoint_inputs(cfg, "classifier.rmae")},
                name="attack_report")
    return {"rows": len(report.rows)}


def _selector(cfg):
    mae_path = _ckpt(cfg, "mae.rmae")
    if mae_path.exists():
        enc, _ = load_model(mae_path, "encoder")
        return enc
    warnings.warn(f"{mae_path} missing; clustering with the finetuned encoder")
    return load_model(_ckpt(cfg, "classifier.rmae"))[0].encoder


def stage_cluster(cfg: RunConfig) -> dict:
    data = load_data(cfg)
    feats = extract_cluster_features(_selector(cfg), data.train_images)
    d = cfg.defense
    res = fit_clusters(feats, d.n_clusters, seed=cfg.seed, batch_size=d.kmeans_batch, sweeps=d.kmeans_sweeps)
    save_archive(_ckpt(cfg, "clusters.rmae"), {
        "prototypes": res.prototypes.float(),
        "assignments": res.assignments.double(),
        "objective": torch.tensor(res.objective, dtype=torch.float64),
    })
    return {"objective": res.objective[-1]}


def stage_train_prompts(cfg: RunConfig) -> dict:
    data = load_data(cfg)
    model, _ = load_model(_ckpt(cfg, "classifier.rmae"))
    clusters, _ = load_archive(_ckpt(cfg, "clusters.rmae"))
    d = cfg.defense
    size = cfg.model.image_size
    bank = PromptBank.empty(clusters["prototypes"], cfg.model.channels, size, size * d.radius_fraction, d.lam)
    bank, history = train_prompts(model, data.train_images, data.train_labels,
                                  clusters["assignments"].long(), bank, d, seed=cfg.seed)
    save_bank(_ckpt(cfg, "prompts.rmae"), bank)
    atomic_write(_ckpt(cfg, "prompt_history.json"), json.dumps(history, indent=2))
    return {"final_loss": history[-1] if history else None}


def build_pipeline(cfg: RunConfig, model=None) -> DefendedPipeline:
    model = model if model is not None else load_model(_ckpt(cfg, "classifier.rmae"))[0]
    bank = load_bank(_ckpt(cfg, "prompts.rmae"))
    d = cfg.defense
    return DefendedPipeline(model, _selector(cfg), bank, d.selection, d.tau, d.gumbel_hard, seed=cfg.seed)


def stage_evaluate(cfg: RunConfig) -> dict:
    data = load_data(cfg)
    model, _ = load_model(_ckpt(cfg, "classifier.rmae"))
    x, y = _eval_split(cfg, data)
    report = evaluate(model, x, y, cfg.attacks, "classifier", "none", cfg.seed, cfg.eval.batch_size)
    if _ckpt(cfg, "prompts.rmae").exists():
        pipe = build_pipeline(cfg, model)
        report.extend(evaluate(pipe, x, y, cfg.attacks, "classifier", f"prompt-{cfg.defense.selection}",
                               cfg.seed, cfg.eval.batch_size))
    inputs = {**data_inputs(cfg), **_checkpoint_inputs(cfg, "classifier.rmae", "mae.rmae", "prompts.rmae")}
    report_emit(report, {}, cfg.out, cfg, inputs)
    return {"rows": len(report.rows)}


def stage_analyze(cfg: RunConfig) -> dict:
    data = load_data(cfg)
    model, _ = load_model(_ckpt(cfg, "classifier.rmae"))
    n = min(cfg.eval.analysis_batch, len(data.test_images))
    xa, ya = data.test_images[:n], data.test_labels[:n]
    xs, ys = _eval_split(cfg, data)
    arts: dict = {}
    arts["saliency"] = frequency.freq_saliency(model, xa, ya)
    arts["lowpass_sweep"] = frequency.lowpass_sweep(model, xs, ys, cfg.eval.sweep_radii)
    feats = model.features(xa)
    n_tok = feats[0].shape[1]
    step = max(1, (n_tok - 1) // cfg.eval.cka_tokens)
    tokens = [0] + list(range(1, n_tok, step))[: cfg.eval.cka_tokens]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        arts["cka_tokens"] = analysis.cka_token_map([f.detach() for f in feats], tokens)
        arts["cka_layers"] = analysis.cka_layer_grid([f[:, 0].detach() for f in feats])
    pgd_cfg = next((a for a in cfg.attacks if a.kind == "pgd" and a.norm == "linf" and a.epsilon > 0),
                   AttackConfig(kind="pgd", norm="linf", epsilon=8 / 255))
    adv = run_attack(model, xa, ya, pgd_cfg, seed=cfg.seed).adversarials
    with torch.no_grad():
        arts["layer_deviation"] = analysis.layer_deviation(model.features(xa), model.features(adv), pgd_cfg.label)
    arts["perturbation_variance"] = analysis.perturbation_variance(xa, adv)
    rgb, gray = analysis.perturbation_render(xa[0], adv[0])
    arts["residual_rgb"] = rgb.float()
    arts["residual_gray"] = gray.float()
    inputs = {**data_inputs(cfg), **_checkpoint_inputs(cfg, "classifier.rmae")}
    report_emit(EvalReport(), arts, Path(cfg.out) / "analysis", cfg, inputs, name="analysis")
    return {"perturbation_variance": arts["perturbation_variance"]}


def stage_report(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    parts = []
    for name in ("report.txt", "attack_report.txt"):
        if (out / name).exists():
            parts.append(f"== {name}\n{(out / name).read_text()}")
    for name in ("classifier.rmae",):
        if (out / name).exists():
            _, meta = load_archive(out / name)
            if "clean_acc" in meta:
                parts.append(f"== finetune\nclean accuracy {meta['clean_acc']:.2f}\n")
    analysis_dir = out / "analysis"
    if analysis_dir.exists():
        parts.append("== analysis\n" + "\n".join(sorted(p.name for p in analysis_dir.iterdir())) + "\n")
    if not parts:
        raise FileNotFoundError(f"{out}: no stage outputs to report")
    atomic_write(out / "run_summary.txt", "\n".join(parts))
    atomic_write(out / "config.yaml", dump_config(cfg))
    return {"sections": len(parts)}


STAGE_FNS = {
    "pretrain": stage_pretrain,
    "finetune": stage_finetune,
    "attack": stage_attack,
    "cluster": stage_cluster,
    "train-prompts": stage_train_prompts,
    "evaluate": stage_evaluate,
    "analyze": stage_analyze,
    "report": stage_report,
}


def run_stage(cfg: RunConfig) -> dict:
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    atomic_write(Path(cfg.out) / f"config.{cfg.stage}.yaml", dump_config(cfg))
    return STAGE_FNS[cfg.stage](cfg)
