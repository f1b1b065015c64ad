"""
模型与级联的 checkpoint

单个模型：`<name>.json` 清单（kind、按参数顺序的形状、超参数、种子、词表、格式版本）
加 `<name>.bin`（按清单顺序拼接的小端 float64）。读回与写出逐位一致。

级联：目录下 `cascade.json` 记录阶段顺序、维度、配置与各阶段 checkpoint 名；
各阶段潜变量矩阵存为 `latents_stage<k>.bin`，形状记录在 `cascade.json` 中。
"""

import json
import os
from typing import List, Tuple

import numpy as np

from .api import logger
from .cascade import Cascade, LatentDataset, StageModel, StageSpec
from .numcore import Rng
from .seqvae import SeqVaeModel, Vocab
from .vae import VaeModel

FORMAT_VERSION = 1
BLOB_DTYPE = "<f8"
CASCADE_MANIFEST = "cascade.json"


class CheckpointError(Exception):
    """checkpoint 缺失、损坏或与模型结构不符"""
    pass


def _write_json(path: str, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)


def _read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint manifest {path} is not valid JSON: {e}") from e


def _write_blob(path: str, arrays: List[np.ndarray]) -> None:
    flat = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    blob = np.concatenate(flat) if flat else np.zeros(0)
    with open(path, "wb") as f:
        f.write(blob.astype(BLOB_DTYPE).tobytes())


def _read_blob(path: str, expected: int) -> np.ndarray:
    if not os.path.exists(path):
        raise CheckpointError(f"parameter blob not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    values = np.frombuffer(raw, dtype=BLOB_DTYPE).astype(np.float64)
    if values.size != expected:
        raise CheckpointError(f"{path} holds {values.size} values, manifest expects {expected}")
    return values


# =============================================
# 单个模型
# =============================================

def model_hyperparameters(model: StageModel) -> dict:
    if isinstance(model, SeqVaeModel):
        return {
            "latent_dim": model.latent_dim,
            "hidden_size": model.hidden_size,
            "embed_dim": model.embed_dim,
            "decoder_layers": model.decoder_layers,
            "max_len": model.max_len,
        }
    return {
        "input_dim": model.input_dim,
        "latent_dim": model.latent_dim,
        "hidden": list(model.hidden),
        "head": model.head,
        "vocab_size": model.vocab_size,
    }


def save_model(model: StageModel, directory: str, name: str, seed: int = 0) -> Tuple[str, str]:
    """写出清单与参数 blob

    Returns:
        (清单路径, blob 路径)
    """
    os.makedirs(directory, exist_ok=True)
    params = model.parameters()
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "seed": int(seed),
        "trained": bool(model.trained),
        "hyperparameters": model_hyperparameters(model),
        "parameters": [{"name": p.name, "shape": list(p.shape)} for p in params],
        "blob": f"{name}.bin",
        "dtype": BLOB_DTYPE,
    }
    if isinstance(model, SeqVaeModel):
        manifest["vocab"] = list(model.vocab.tokens)
    else:
        manifest["gamma"] = model.gamma

    manifest_path = os.path.join(directory, f"{name}.json")
    blob_path = os.path.join(directory, f"{name}.bin")
    _write_blob(blob_path, [p.data for p in params])
    _write_json(manifest_path, manifest)
    logger.debug(f"Saved {model.kind} checkpoint {manifest_path} ({len(params)} tensors)")
    return manifest_path, blob_path


def _build_model(manifest: dict) -> StageModel:
    kind = manifest.get("kind")
    hyper = manifest.get("hyperparameters", {})
    if kind == SeqVaeModel.kind:
        if "vocab" not in manifest:
            raise CheckpointError("sequence checkpoint is missing its vocab")
        return SeqVaeModel(Vocab(list(manifest["vocab"])), rng=Rng(0), **hyper)
    if kind == VaeModel.kind:
        return VaeModel(rng=Rng(0), **hyper)
    raise CheckpointError(f"unknown model kind '{kind}'")


def load_model(directory: str, name: str) -> StageModel:
    """按清单重建模型结构并填入参数

    Raises:
        CheckpointError: 版本不符、文件缺失或参数形状不一致
    """
    manifest = _read_json(os.path.join(directory, f"{name}.json"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version} (expected {FORMAT_VERSION})")
    model = _build_model(manifest)
    params = model.parameters()
    recorded = manifest.get("parameters", [])
    if len(recorded) != len(params):
        raise CheckpointError(f"checkpoint lists {len(recorded)} tensors, model has {len(params)}")
    for entry, p in zip(recorded, params):
        if entry["name"] != p.name or tuple(entry["shape"]) != p.shape:
            raise CheckpointError(
                f"tensor mismatch: checkpoint {entry['name']} {entry['shape']} vs model {p.name} {list(p.shape)}"
            )

    expected = sum(int(np.prod(p.shape, dtype=np.int64)) for p in params)
    values = _read_blob(os.path.join(directory, manifest.get("blob", f"{name}.bin")), expected)
    offset = 0
    for p in params:
        size = int(np.prod(p.shape, dtype=np.int64))
        p.data = values[offset:offset + size].reshape(p.shape).copy()
        offset += size
    model.trained = bool(manifest.get("trained", True))
    return model


# =============================================
# 级联
# =============================================

def stage_name(stage_index: int) -> str:
    return f"stage{stage_index}"


def save_cascade(cascade: Cascade, directory: str) -> List[str]:
    """保存全部阶段、潜变量矩阵与 cascade.json

    Returns:
        写出的文件路径列表（cascade.json 在最后）
    """
    os.makedirs(directory, exist_ok=True)
    files: List[str] = []
    stages = []
    for k, (model, spec, latents) in enumerate(zip(cascade.stages, cascade.specs, cascade.latents), start=1):
        name = stage_name(k)
        files.extend(save_model(model, directory, name, seed=cascade.seed))
        latent_file = f"latents_stage{k}.bin"
        _write_blob(os.path.join(directory, latent_file), [latents.data])
        files.append(os.path.join(directory, latent_file))
        stages.append({
            "stage": k,
            "checkpoint": name,
            "kind": model.kind,
            "input_dim": cascade.input_dim(k),
            "latent_dim": model.latent_dim,
            "gamma": model.gamma,
            "spec": spec.to_dict(),
            "latents": {"file": latent_file, "shape": list(latents.shape), "seed": latents.seed},
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "modality": cascade.modality,
        "data_dim": cascade.data_dim,
        "seed": cascade.seed,
        "depth": cascade.depth,
        "stages": stages,
    }
    path = os.path.join(directory, CASCADE_MANIFEST)
    _write_json(path, manifest)
    files.append(path)
    logger.info(f"Saved {cascade.depth}-stage cascade to {directory}")
    return files


def load_cascade(directory: str) -> Cascade:
    manifest = _read_json(os.path.join(directory, CASCADE_MANIFEST))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported cascade format_version {manifest.get('format_version')}")
    stages: List[StageModel] = []
    specs: List[StageSpec] = []
    latents: List[LatentDataset] = []
    for entry in manifest.get("stages", []):
        k = int(entry["stage"])
        stages.append(load_model(directory, entry["checkpoint"]))
        specs.append(StageSpec.from_dict(entry["spec"]))
        info = entry["latents"]
        shape = tuple(int(s) for s in info["shape"])
        values = _read_blob(os.path.join(directory, info["file"]), int(np.prod(shape, dtype=np.int64)))
        latents.append(LatentDataset(values.reshape(shape), stage_index=k, seed=int(info.get("seed", 0))))
    if not stages:
        raise CheckpointError(f"{directory} lists no stages")
    logger.info(f"Loaded {len(stages)}-stage cascade from {directory}")
    return Cascade(
        stages=stages,
        specs=specs,
        latents=latents,
        modality=manifest["modality"],
        data_dim=manifest.get("data_dim"),
        seed=int(manifest.get("seed", 0)),
    )


def find_cascade_dirs(root: str) -> List[str]:
    """返回 root 下（含 root 本身）所有含 cascade.json 的目录，按路径排序"""
    found: List[str] = []
    for current, _dirs, files in os.walk(root):
        if CASCADE_MANIFEST in files:
            found.append(current)
    return sorted(found)


def tensors_equal(a: StageModel, b: StageModel) -> bool:
    pa, pb = a.parameters(), b.parameters()
    return len(pa) == len(pb) and all(
        x.shape == y.shape and np.array_equal(x.data, y.data) for x, y in zip(pa, pb)
    )
