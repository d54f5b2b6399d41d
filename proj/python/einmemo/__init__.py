"""Learnable border prompts for visual in-context learning."""

from ._einmemo import (
    BorderPrompt,
    DataError,
    Error,
    NumericalError,
    TaskDataset,
    ToyModel,
    UsageError,
    binarize,
    compose_canvas,
    default_prompt_config,
    default_toy_config,
    eval_icl,
    grad_check,
    init_prompt,
    iou,
    load_pairs,
    masked_token_indices,
    param_count,
    synth_task,
    train_prompt,
    train_toy_frozen,
    write_dataset,
)

__all__ = [
    "BorderPrompt",
    "DataError",
    "Error",
    "NumericalError",
    "TaskDataset",
    "ToyModel",
    "UsageError",
    "binarize",
    "compose_canvas",
    "default_prompt_config",
    "default_toy_config",
    "eval_icl",
    "grad_check",
    "init_prompt",
    "iou",
    "load_pairs",
    "masked_token_indices",
    "param_count",
    "synth_task",
    "train_prompt",
    "train_toy_frozen",
    "write_dataset",
]
