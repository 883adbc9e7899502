"""Pipeline stages gluing models, checkpoints, and reports together.

Each stage reads/writes artifacts under the config's output directory:

* ``train-dense``   dense.ckpt, dense_log.jsonl
* ``capture``       bank.ckpt
* ``upcycle``       moe_<method>.ckpt, init_report_<method>.json
* ``train-moe``     moe_<method>_trained.ckpt, train_log_<method>.jsonl
* ``analyze``       analysis_<stem>.{json,csv}, routing_<stem>.csv
* ``gradcheck``     gradcheck.json
* ``compare``       compare.csv

All randomness is derived from the config's root seed through named streams,
so reruns with identical inputs are byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .analysis import (
    analyze_model,
    write_analysis_csv,
    write_analysis_json,
    write_routing_csv,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .errors import ClusterUpError
from .moe import DenseFfn, MoeLayer
from .seeding import derive_seed
from .train import (
    ModelTeacher,
    ToyModel,
    grad_check,
    evaluate,
    make_dense_model,
    make_model_teacher,
    make_synthetic_dataset,
    run_training,
)
from .upcycle import ActivationBank, default_moe_sites, upcycle_model


class MissingArtifact(ClusterUpError):
    """A required upstream checkpoint does not exist."""


# ---------------------------------------------------------------------------
# artifact paths
# ---------------------------------------------------------------------------

def out_dir(cfg: PipelineConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def dense_path(cfg) -> Path:
    return out_dir(cfg) / "dense.ckpt"


def bank_path(cfg) -> Path:
    return out_dir(cfg) / "bank.ckpt"


def moe_path(cfg, method: str, trained: bool = False) -> Path:
    suffix = "_trained" if trained else ""
    return out_dir(cfg) / f"moe_{method}{suffix}.ckpt"


# ---------------------------------------------------------------------------
# model (de)serialization
# ---------------------------------------------------------------------------

def model_tensors(model: ToyModel, prefix: str = "") -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {prefix + "head": model.head}
    for b, block in enumerate(model.blocks):
        bp = f"{prefix}block{b}."
        if isinstance(block, MoeLayer):
            tensors[bp + "router"] = block.router
            for i, e in enumerate(block.experts):
                ep = f"{bp}expert{i}."
                tensors[ep + "w1"] = e.w1
                tensors[ep + "b1"] = e.b1
                tensors[ep + "w2"] = e.w2
                tensors[ep + "b2"] = e.b2
        else:
            tensors[bp + "w1"] = block.w1
            tensors[bp + "b1"] = block.b1
            tensors[bp + "w2"] = block.w2
            tensors[bp + "b2"] = block.b2
    return tensors


def model_structure(model: ToyModel) -> dict:
    blocks = []
    for block in model.blocks:
        if isinstance(block, MoeLayer):
            blocks.append({
                "kind": "moe",
                "n_experts": block.n_experts,
                "k": block.k,
                "capacity_factor": block.capacity_factor,
            })
        else:
            blocks.append({"kind": "dense"})
    return {
        "input_dim": model.input_dim,
        "n_classes": model.n_classes,
        "blocks": blocks,
    }


def model_from_tensors(
    structure: dict, tensors: dict[str, np.ndarray], prefix: str = ""
) -> ToyModel:
    blocks = []
    for b, entry in enumerate(structure["blocks"]):
        bp = f"{prefix}block{b}."
        if entry["kind"] == "moe":
            experts = [
                DenseFfn(
                    tensors[f"{bp}expert{i}.w1"], tensors[f"{bp}expert{i}.b1"],
                    tensors[f"{bp}expert{i}.w2"], tensors[f"{bp}expert{i}.b2"],
                )
                for i in range(entry["n_experts"])
            ]
            blocks.append(MoeLayer(
                experts=experts, router=tensors[bp + "router"],
                k=entry["k"], capacity_factor=entry["capacity_factor"],
            ))
        else:
            blocks.append(DenseFfn(
                tensors[bp + "w1"], tensors[bp + "b1"],
                tensors[bp + "w2"], tensors[bp + "b2"],
            ))
    return ToyModel(
        input_dim=structure["input_dim"],
        blocks=blocks,
        head=tensors[prefix + "head"],
    )


def save_model_checkpoint(
    path, model: ToyModel, cfg: PipelineConfig, seeds: dict,
    extra: dict | None = None, teacher: ModelTeacher | None = None,
    cluster_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    tensors = model_tensors(model)
    meta = {"model": model_structure(model)}
    if teacher is not None:
        for b, site_teacher in sorted(teacher.sites.items()):
            mirror_model = _mirror_as_model(site_teacher.mirror, model, b)
            tensors.update({
                k: v for k, v in model_tensors(mirror_model, prefix="teacher.").items()
                if k.startswith(f"teacher.block{b}.")
            })
        meta["teacher"] = {
            "beta": teacher.beta,
            "step_counts": {str(b): t.step_count for b, t in teacher.sites.items()},
        }
    if cluster_tensors:
        tensors.update(cluster_tensors)
    save_checkpoint(path, tensors, config=cfg.to_dict(), seeds=seeds,
                    extra={**meta, **(extra or {})})


def _mirror_as_model(mirror: MoeLayer, model: ToyModel, site: int) -> ToyModel:
    # Wrap the mirror at its block index so tensor names line up with the student.
    blocks: list = [model.blocks[b] for b in range(len(model.blocks))]
    blocks[site] = mirror
    return ToyModel(input_dim=model.input_dim, blocks=blocks, head=model.head)


def load_model_checkpoint(path) -> tuple[ToyModel, ModelTeacher | None, dict]:
    ckpt = load_checkpoint(path)
    structure = ckpt.extra["model"]
    model = model_from_tensors(structure, ckpt.tensors)
    teacher = None
    if "teacher" in ckpt.extra:
        beta = ckpt.extra["teacher"]["beta"]
        step_counts = ckpt.extra["teacher"]["step_counts"]
        from .distill import EmaTeacher

        sites = {}
        for b in model.moe_sites:
            key = f"teacher.block{b}.router"
            if key not in ckpt.tensors:
                continue
            shadow = model_from_tensors(structure, {
                **{k: v for k, v in ckpt.tensors.items() if not k.startswith("teacher.")},
                **{k[len("teacher."):]: v for k, v in ckpt.tensors.items()
                   if k.startswith("teacher.")},
            })
            sites[b] = EmaTeacher(
                mirror=shadow.blocks[b], beta=beta,
                step_count=step_counts.get(str(b), 0),
            )
        teacher = ModelTeacher(sites=sites, beta=beta)
    return model, teacher, ckpt.manifest


def _require_artifact(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run `{hint}` first")
    return path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _datasets(cfg: PipelineConfig):
    """Train and held-out eval splits drawn from one generating distribution."""
    full = make_synthetic_dataset(
        d=cfg.model.d, n_classes=cfg.model.n_classes,
        n_clusters=cfg.data.n_clusters, n=cfg.data.n + cfg.data.n_eval,
        separation=cfg.data.separation,
        seed=derive_seed(cfg.root_seed, "data"),
    )
    return full.slice(0, cfg.data.n), full.slice(cfg.data.n, full.n)


def _seeds_dict(cfg: PipelineConfig) -> dict:
    root = cfg.root_seed
    return {
        "root": root,
        "data": derive_seed(root, "data"),
        "router": derive_seed(root, "router"),
        "drop": derive_seed(root, "drop"),
        "clustering": derive_seed(root, "clustering"),
        "calibration": derive_seed(root, "calibration"),
    }


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_train_dense(cfg: PipelineConfig) -> Path:
    dataset, _ = _datasets(cfg)
    model = make_dense_model(
        cfg.model.d, cfg.model.h, cfg.model.blocks, cfg.model.n_classes,
        seed=derive_seed(cfg.root_seed, "model_init"),
    )
    log: list[dict] = []
    run_training(
        model, None, dataset,
        steps=cfg.train.steps_dense, batch_size=cfg.train.batch_size,
        lr=cfg.train.lr, seed=derive_seed(cfg.root_seed, "dense_batches"),
        log_fn=log.append,
    )
    path = dense_path(cfg)
    save_model_checkpoint(path, model, cfg, _seeds_dict(cfg))
    _write_jsonl(out_dir(cfg) / "dense_log.jsonl", log)
    return path


def run_capture(cfg: PipelineConfig) -> Path:
    from .upcycle import capture_activations

    model, _, _ = load_model_checkpoint(
        _require_artifact(dense_path(cfg), "train-dense")
    )
    dataset, _ = _datasets(cfg)
    sites = default_moe_sites(cfg.model.blocks)
    bank = capture_activations(
        model, dataset.inputs, sites, cfg.calibration.token_cap,
        seed=derive_seed(cfg.root_seed, "calibration"),
    )
    tensors = {f"site{b}.activations": acts for b, acts in sorted(bank.per_site.items())}
    path = bank_path(cfg)
    save_checkpoint(
        path, tensors, config=cfg.to_dict(), seeds=_seeds_dict(cfg),
        extra={"token_cap": bank.token_cap, "sites": sites},
    )
    return path


def load_bank(path) -> ActivationBank:
    ckpt = load_checkpoint(path)
    per_site = {
        int(name[len("site"):name.index(".")]): arr
        for name, arr in ckpt.tensors.items()
        if name.startswith("site") and name.endswith(".activations")
    }
    return ActivationBank(per_site=per_site, token_cap=ckpt.extra["token_cap"])


def run_upcycle(cfg: PipelineConfig, method: str | None = None) -> Path:
    method = method or cfg.init.method
    dense_model, _, _ = load_model_checkpoint(
        _require_artifact(dense_path(cfg), "train-dense")
    )
    bank = None
    if method == "cluster":
        bank = load_bank(_require_artifact(bank_path(cfg), "capture"))
    moe_model, reports, cluster_models = upcycle_model(
        dense_model, method,
        n_experts=cfg.moe.n_experts, k=cfg.moe.k,
        capacity_factor=cfg.moe.capacity_train,
        seed=derive_seed(cfg.root_seed, f"upcycle:{method}"),
        bank=bank, ratio=cfg.init.ratio, fraction=cfg.init.fraction,
        tau=cfg.init.tau, router_scale=cfg.init.router_scale,
    )
    cluster_tensors: dict[str, np.ndarray] = {}
    cluster_meta: dict[str, dict] = {}
    for b, cm in sorted(cluster_models.items()):
        cluster_tensors[f"cluster.site{b}.centroids"] = cm.centroids
        cluster_tensors[f"cluster.site{b}.assignments"] = cm.assignments.astype(np.float64)
        cluster_tensors[f"cluster.site{b}.pca_projection"] = cm.pca_projection
        cluster_tensors[f"cluster.site{b}.objective_trace"] = np.asarray(cm.objective_trace)
        cluster_meta[str(b)] = {"seed": cm.seed}
    path = moe_path(cfg, method)
    save_model_checkpoint(
        path, moe_model, cfg, _seeds_dict(cfg),
        extra={"init_method": method, "cluster_meta": cluster_meta},
        cluster_tensors=cluster_tensors,
    )
    report_path = out_dir(cfg) / f"init_report_{method}.json"
    with open(report_path, "w") as fh:
        json.dump(
            {str(b): r.to_dict() for b, r in sorted(reports.items())},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    return path


def run_train_moe(cfg: PipelineConfig, method: str | None = None, eesd: bool = False) -> Path:
    method = method or cfg.init.method
    model, _, _ = load_model_checkpoint(
        _require_artifact(moe_path(cfg, method), f"upcycle --method {method}")
    )
    teacher = make_model_teacher(model, cfg.train.beta) if eesd else None
    dataset, _ = _datasets(cfg)
    log: list[dict] = []
    run_training(
        model, teacher, dataset,
        steps=cfg.train.steps, batch_size=cfg.train.batch_size, lr=cfg.train.lr,
        lambda_lb=cfg.train.lambda_lb,
        lambda_eesd=cfg.train.lambda_eesd if eesd else 0.0,
        capacity_factor=cfg.moe.capacity_train,
        seed=derive_seed(cfg.root_seed, f"moe_batches:{method}"),
        log_fn=log.append,
    )
    path = moe_path(cfg, method, trained=True)
    save_model_checkpoint(
        path, model, cfg, _seeds_dict(cfg),
        extra={"init_method": method, "eesd": eesd}, teacher=teacher,
    )
    _write_jsonl(out_dir(cfg) / f"train_log_{method}.jsonl", log)
    return path


def run_analyze(cfg: PipelineConfig, checkpoint: Path | str) -> list[Path]:
    ckpt_path = _require_artifact(Path(checkpoint), "upcycle or train-moe")
    model, _, _ = load_model_checkpoint(ckpt_path)
    _, eval_set = _datasets(cfg)
    report = analyze_model(model, eval_set.inputs, cfg.moe.capacity_eval)
    from .train import model_forward

    state = model_forward(model, eval_set.inputs, cfg.moe.capacity_eval)
    stem = ckpt_path.stem
    paths = [
        out_dir(cfg) / f"analysis_{stem}.json",
        out_dir(cfg) / f"analysis_{stem}.csv",
        out_dir(cfg) / f"routing_{stem}.csv",
    ]
    write_analysis_json(report, paths[0])
    write_analysis_csv(report, paths[1])
    write_routing_csv(state.records, paths[2])
    return paths


def run_gradcheck(cfg: PipelineConfig) -> Path:
    # Self-contained verification on small fresh models: a dense stack, an
    # upcycled MoE stack, and the MoE stack with an EMA teacher attached.
    d, h = cfg.model.d, cfg.model.h
    dataset = make_synthetic_dataset(
        d=d, n_classes=cfg.model.n_classes, n_clusters=cfg.data.n_clusters,
        n=32, separation=cfg.data.separation,
        seed=derive_seed(cfg.root_seed, "gradcheck_data"),
    )
    dense_model = make_dense_model(
        d, h, cfg.model.blocks, cfg.model.n_classes,
        seed=derive_seed(cfg.root_seed, "gradcheck_model"),
    )
    dense_result = grad_check(
        dense_model, None, dataset.inputs, dataset.labels,
        lambda_lb=0.0, lambda_eesd=0.0,
        seed=derive_seed(cfg.root_seed, "gradcheck_sample"),
        samples_per_tensor=25,
    )
    moe_model, _, _ = upcycle_model(
        dense_model, "sparse",
        n_experts=cfg.moe.n_experts, k=cfg.moe.k,
        capacity_factor=cfg.moe.capacity_train,
        seed=derive_seed(cfg.root_seed, "gradcheck_upcycle"),
        router_scale=cfg.init.router_scale,
    )
    teacher = make_model_teacher(moe_model, cfg.train.beta)
    # Give the teacher its own parameter values so the distillation term is live.
    for site_teacher in teacher.sites.values():
        site_teacher.mirror.router += 0.01
    moe_result = grad_check(
        moe_model, teacher, dataset.inputs, dataset.labels,
        lambda_lb=cfg.train.lambda_lb, lambda_eesd=cfg.train.lambda_eesd,
        capacity_factor=cfg.moe.capacity_train,
        seed=derive_seed(cfg.root_seed, "gradcheck_sample"),
        samples_per_tensor=25,
    )
    payload = {
        "dense": {k: v for k, v in dense_result.items() if k != "per_tensor"},
        "moe": {k: v for k, v in moe_result.items() if k != "per_tensor"},
    }
    path = out_dir(cfg) / "gradcheck.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

COMPARE_COLUMNS = (
    "seed", "method", "task_loss", "lb_loss", "accuracy",
    "routing_entropy", "utilization_min", "utilization_max",
    "mean_similarity",
)


def compare_run(cfg: PipelineConfig, root_seed: int, method: str, eesd: bool) -> dict:
    """One end-to-end pipeline pass in memory; returns the final metrics."""
    from dataclasses import replace

    from .upcycle import capture_activations

    run_cfg = replace(cfg, data=replace(cfg.data, seed=root_seed))
    dataset, eval_set = _datasets(run_cfg)
    model = make_dense_model(
        run_cfg.model.d, run_cfg.model.h, run_cfg.model.blocks,
        run_cfg.model.n_classes, seed=derive_seed(root_seed, "model_init"),
    )
    run_training(
        model, None, dataset,
        steps=run_cfg.train.steps_dense, batch_size=run_cfg.train.batch_size,
        lr=run_cfg.train.lr, seed=derive_seed(root_seed, "dense_batches"),
    )
    bank = None
    if method == "cluster":
        bank = capture_activations(
            model, dataset.inputs, default_moe_sites(run_cfg.model.blocks),
            run_cfg.calibration.token_cap,
            seed=derive_seed(root_seed, "calibration"),
        )
    moe_model, _, _ = upcycle_model(
        model, method,
        n_experts=run_cfg.moe.n_experts, k=run_cfg.moe.k,
        capacity_factor=run_cfg.moe.capacity_train,
        seed=derive_seed(root_seed, f"upcycle:{method}"),
        bank=bank, ratio=run_cfg.init.ratio, fraction=run_cfg.init.fraction,
        tau=run_cfg.init.tau, router_scale=run_cfg.init.router_scale,
    )
    teacher = make_model_teacher(moe_model, run_cfg.train.beta) if eesd else None
    run_training(
        moe_model, teacher, dataset,
        steps=run_cfg.train.steps, batch_size=run_cfg.train.batch_size,
        lr=run_cfg.train.lr, lambda_lb=run_cfg.train.lambda_lb,
        lambda_eesd=run_cfg.train.lambda_eesd if eesd else 0.0,
        capacity_factor=run_cfg.moe.capacity_train,
        seed=derive_seed(root_seed, f"moe_batches:{method}"),
    )
    report, state, accuracy = evaluate(
        moe_model, eval_set.inputs, eval_set.labels, run_cfg.moe.capacity_eval
    )
    analysis = analyze_model(moe_model, eval_set.inputs, run_cfg.moe.capacity_eval)
    utilizations = np.concatenate(
        [site.utilization for site in analysis.per_site.values()]
    )
    entropy = float(np.mean(
        [site.mean_routing_entropy for site in analysis.per_site.values()]
    ))
    similarity = float(np.mean(
        [site.mean_pairwise_similarity for site in analysis.per_site.values()]
    ))
    return {
        "seed": root_seed,
        "method": method,
        "task_loss": report.task,
        "lb_loss": report.lb,
        "accuracy": accuracy,
        "routing_entropy": entropy,
        "utilization_min": float(utilizations.min()),
        "utilization_max": float(utilizations.max()),
        "mean_similarity": similarity,
    }


def run_compare(cfg: PipelineConfig, n_seeds: int, eesd: bool = False,
                methods=("sparse", "drop", "drop_svd", "cluster")) -> Path:
    rows = []
    for offset in range(n_seeds):
        root = cfg.root_seed + offset
        for method in methods:
            rows.append(compare_run(cfg, root, method, eesd))
    path = out_dir(cfg) / "compare.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path
