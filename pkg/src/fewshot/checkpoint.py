"""Model checkpoints and dataset caches on top of the container format."""

from __future__ import annotations

import numpy as np

from .container import read_container, write_container
from .data import Dataset
from .errors import DataError
from .model import ConvBlock, ModelConfig, ModelParams, N_ATTN_BLOCKS, N_EMBED_BLOCKS
from .optim import AdamState


def save_checkpoint(path, config: ModelConfig, params: ModelParams, state: AdamState | None = None):
    arrays = list(params.named_arrays())
    meta = {"model": config.to_dict(), "adam_t": state.t if state else None}
    if state is not None:
        arrays += [(f"adam.m.{n}", state.m[n]) for n, _ in params.named_arrays()]
        arrays += [(f"adam.v.{n}", state.v[n]) for n, _ in params.named_arrays()]
    write_container(path, "checkpoint", meta, arrays)


def _block_from(arrays, prefix):
    try:
        return ConvBlock(
            kernel=arrays[f"{prefix}.kernel"],
            bias=arrays[f"{prefix}.bias"],
            gamma=arrays[f"{prefix}.gamma"],
            beta=arrays[f"{prefix}.beta"],
        )
    except KeyError as exc:
        raise DataError(f"checkpoint is missing array {exc}") from exc


def load_checkpoint(path):
    """Returns (ModelConfig, ModelParams, AdamState or None)."""
    _, meta, arrays = read_container(path, expect_kind="checkpoint")
    config = ModelConfig.from_dict(meta["model"])
    params = ModelParams(
        embed=[_block_from(arrays, f"embed{i}") for i in range(1, N_EMBED_BLOCKS + 1)],
        attn=[_block_from(arrays, f"attn{i}") for i in range(1, N_ATTN_BLOCKS + 1)],
        fc_weight=arrays["attn.fc_weight"],
        fc_bias=arrays["attn.fc_bias"],
    )
    state = None
    if meta.get("adam_t") is not None:
        state = AdamState(
            m={n: arrays[f"adam.m.{n}"] for n, _ in params.named_arrays()},
            v={n: arrays[f"adam.v.{n}"] for n, _ in params.named_arrays()},
            t=int(meta["adam_t"]),
        )
    return config, params, state


def save_dataset_cache(path, ds: Dataset) -> None:
    meta = {
        "note": ds.note,
        "splits": {str(c): s for c, s in ds.splits.items()},
        "class_ids": ds.class_ids(),
    }
    arrays = []
    for cid in ds.class_ids():
        arrays.append((f"class_{cid}", ds.classes[cid]))
        arrays.append((f"class_{cid}.outliers", ds.outlier_flags(cid).astype(np.float64)))
    write_container(path, "dataset", meta, arrays)


def load_dataset_cache(path) -> Dataset:
    _, meta, arrays = read_container(path, expect_kind="dataset")
    classes, outliers, splits = {}, {}, {}
    for cid in meta["class_ids"]:
        classes[cid] = arrays[f"class_{cid}"]
        outliers[cid] = arrays[f"class_{cid}.outliers"].astype(bool)
        tag = meta["splits"].get(str(cid))
        if tag:
            splits[cid] = tag
    return Dataset(classes=classes, splits=splits, note=meta.get("note", ""), outliers=outliers)
