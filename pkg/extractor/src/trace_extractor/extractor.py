"""Expert-routing trace extraction from MoE causal language models.

Registers forward hooks on every router gate, runs greedy generation over a
set of prompts, and records which experts the gates selected for each token
and layer. Prompt tokens are written as per-token prefill events, generated
tokens as decode events, in the line-delimited trace format the simulation
lab consumes (header line with model_name / num_layers / num_experts /
top_k, then one event record per line).
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import nn


class ExtractorError(Exception):
    pass


class ModelNotMoeError(ExtractorError):
    """No router gates found: the model does not route tokens to experts."""


class SchemaValidationError(ExtractorError):
    """Recorded events violate the trace-format invariants."""


@dataclass
class ExtractorConfig:
    """Flags of the command-line tool mirror these fields one to one.

    dataset accepts either a local text file with one prompt per line
    ("file:<path>" or a bare path) or a Hugging Face dataset
    ("hf:<name>[:<config>]"), selected by `split` and read from `text_field`.
    """

    model: str
    dataset: str
    split: str = "validation"
    text_field: Optional[str] = None
    max_seqs: int = 512
    max_prompt_tokens: int = 512
    decode_tokens: int = 64
    output: str = "trace.jsonl"
    device: str = "auto"

    def validate(self) -> None:
        if self.max_seqs < 1:
            raise ExtractorError(f"max_seqs must be >= 1, got {self.max_seqs}")
        if self.max_prompt_tokens < 1:
            raise ExtractorError(
                f"max_prompt_tokens must be >= 1, got {self.max_prompt_tokens}"
            )
        if self.decode_tokens < 0:
            raise ExtractorError(f"decode_tokens must be >= 0, got {self.decode_tokens}")


# --- model introspection ------------------------------------------------------

_EXPERT_COUNT_ATTRS = ("num_local_experts", "num_experts", "n_routed_experts")
_TOP_K_ATTRS = ("num_experts_per_tok", "top_k", "moe_top_k")


def _config_attr(config, names, what: str) -> int:
    for name in names:
        value = getattr(config, name, None)
        if isinstance(value, int) and value > 0:
            return value
    raise ModelNotMoeError(
        f"model config exposes no {what} (looked for {', '.join(names)})"
    )


def _gate_width(module) -> Optional[int]:
    if isinstance(module, nn.Linear):
        return module.out_features
    num_experts = getattr(module, "num_experts", None)
    if isinstance(num_experts, int):
        return num_experts
    weight = getattr(module, "weight", None)
    if weight is not None and getattr(weight, "ndim", 0) == 2:
        return weight.shape[0]
    return None


def find_router_gates(model) -> list[tuple[str, nn.Module]]:
    """Locate one routing gate per MoE layer, ordered by model layer index.

    A gate is a module scoring all experts (width == expert count) whose path
    names it a gate/router: either a plain Linear over hidden states or a
    dedicated top-k router module (Mixtral/OLMoE/Qwen-MoE style). Models that
    interleave dense layers simply contribute fewer gates; trace layer ids
    are assigned in model order.
    """
    num_experts = _config_attr(model.config, _EXPERT_COUNT_ATTRS, "expert count")
    gates = []
    for name, module in model.named_modules():
        leaf = name.rsplit(".", 1)[-1]
        named_like_gate = leaf in ("gate", "router") or leaf.endswith("_gate")
        if not named_like_gate and "Router" not in type(module).__name__:
            continue
        if _gate_width(module) == num_experts:
            gates.append((name, module))
    if not gates:
        raise ModelNotMoeError(
            "no router gates found; the checkpoint does not look like an MoE model"
        )
    return gates


def resolve_device(requested: str) -> torch.device:
    if requested == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(requested)


# --- prompt sources -----------------------------------------------------------


def load_prompts(config: ExtractorConfig) -> list[str]:
    spec = config.dataset
    if spec.startswith("hf:"):
        parts = spec.split(":")[1:]
        name = parts[0]
        subset = parts[1] if len(parts) > 1 else None
        try:
            from datasets import load_dataset
        except ImportError as exc:
            raise ExtractorError(
                "hf: datasets require the 'datasets' package "
                "(pip install moecache-extractor[hf-datasets])"
            ) from exc
        dataset = load_dataset(name, subset, split=config.split)
        text_field = config.text_field or "question"
        if text_field not in dataset.column_names:
            raise ExtractorError(
                f"dataset {name} has no column {text_field!r}; "
                f"available: {dataset.column_names}"
            )
        prompts = [str(row[text_field]) for row in dataset]
    else:
        path = Path(spec[5:] if spec.startswith("file:") else spec)
        if not path.exists():
            raise ExtractorError(f"prompt file does not exist: {path}")
        prompts = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    prompts = prompts[: config.max_seqs]
    if not prompts:
        raise ExtractorError(f"dataset {spec!r} yielded no prompts")
    return prompts


# --- extraction ---------------------------------------------------------------


class _GateRecorder:
    """Captures per-token top-k expert selections from one gate's forward.

    Dedicated router modules return (logits, scores, indices); the indices
    are the model's own selection and are recorded verbatim. Plain linear
    gates return logits, where top-k of the logits equals top-k of the
    softmax the model applies afterwards.
    """

    def __init__(self, top_k: int):
        self.top_k = top_k
        self.rows: list[list[int]] = []

    def hook(self, module, args, output):
        if isinstance(output, tuple) and len(output) >= 3:
            indices = output[2].detach()
            self.rows.extend(indices.reshape(-1, indices.shape[-1]).tolist())
            return
        logits = (output[0] if isinstance(output, tuple) else output).detach()
        logits = logits.reshape(-1, logits.shape[-1])
        top = torch.topk(logits.float(), self.top_k, dim=-1).indices
        self.rows.extend(top.tolist())


def _emit_events(recorders, seq_id: int, prompt_len: int, top_k: int):
    """Turn per-layer captured rows into (phase, step, layer, experts) tuples.

    The first prompt_len rows of every layer belong to the prefill forward;
    the rest are decode steps. Generation may stop early (EOS), so layers
    agree on the decode step count but it can be below the requested budget.
    """
    events = []
    decode_counts = {len(rec.rows) - prompt_len for rec in recorders.values()}
    if len(decode_counts) != 1:
        raise SchemaValidationError(
            f"sequence {seq_id}: layers disagree on captured token count "
            f"({sorted(len(r.rows) for r in recorders.values())})"
        )
    decode_count = decode_counts.pop()
    if decode_count < 0:
        raise SchemaValidationError(
            f"sequence {seq_id}: captured fewer rows than prompt tokens"
        )
    for step in range(prompt_len):
        for layer in sorted(recorders):
            events.append((seq_id, 0, step, layer, recorders[layer].rows[step]))
    for step in range(decode_count):
        for layer in sorted(recorders):
            experts = recorders[layer].rows[prompt_len + step]
            if len(set(experts)) != top_k:
                raise SchemaValidationError(
                    f"sequence {seq_id}, step {step}, layer {layer}: expected "
                    f"{top_k} distinct experts, got {experts}"
                )
            events.append((seq_id, 1, step, layer, experts))
    return events


def extract(config: ExtractorConfig, model=None, tokenizer=None) -> Path:
    """Run extraction and write the trace file; returns the output path.

    model/tokenizer may be injected (e.g. tiny randomly initialized models in
    tests); otherwise they are loaded from config.model with transformers.
    """
    config.validate()
    prompts = load_prompts(config)
    device = resolve_device(config.device)
    if model is None or tokenizer is None:
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tokenizer = tokenizer or AutoTokenizer.from_pretrained(config.model)
        model = model or AutoModelForCausalLM.from_pretrained(config.model)
    model = model.to(device).eval()

    num_experts = _config_attr(model.config, _EXPERT_COUNT_ATTRS, "expert count")
    top_k = _config_attr(model.config, _TOP_K_ATTRS, "routing top-k")
    gates = find_router_gates(model)
    num_layers = len(gates)

    recorders = {layer: _GateRecorder(top_k) for layer in range(num_layers)}
    handles = [
        gate.register_forward_hook(recorders[layer].hook)
        for layer, (_, gate) in enumerate(gates)
    ]

    eos = tokenizer.eos_token_id
    all_events = []
    try:
        with torch.no_grad():
            for seq_id, prompt in enumerate(prompts):
                for rec in recorders.values():
                    rec.rows.clear()
                ids = tokenizer(prompt, return_tensors="pt").input_ids
                ids = ids[:, : config.max_prompt_tokens].to(device)
                if config.decode_tokens > 0:
                    model.generate(
                        ids,
                        max_new_tokens=config.decode_tokens,
                        do_sample=False,
                        use_cache=True,
                        pad_token_id=eos,
                    )
                else:
                    model(ids)
                all_events.extend(
                    _emit_events(recorders, seq_id, ids.shape[1], top_k)
                )
    finally:
        for handle in handles:
            handle.remove()

    _validate_events(all_events, num_layers, num_experts, top_k)
    return _write_trace(config, all_events, num_layers, num_experts, top_k)


def _validate_events(events, num_layers: int, num_experts: int, top_k: int) -> None:
    """Full invariant check before anything touches the output path."""
    prev_key = None
    decode_layers: dict[tuple[int, int], set[int]] = {}
    for seq_id, phase, step, layer, experts in events:
        if not 0 <= layer < num_layers:
            raise SchemaValidationError(f"layer {layer} out of range")
        if len(set(experts)) != len(experts):
            raise SchemaValidationError(f"duplicate experts in event: {experts}")
        if any(not 0 <= e < num_experts for e in experts):
            raise SchemaValidationError(f"expert id out of range in {experts}")
        if phase == 1 and len(experts) != top_k:
            raise SchemaValidationError(
                f"decode event carries {len(experts)} experts, expected {top_k}"
            )
        key = (seq_id, phase, step, layer)
        if prev_key is not None and key <= prev_key:
            raise SchemaValidationError(f"events out of order at {key}")
        prev_key = key
        if phase == 1:
            decode_layers.setdefault((seq_id, step), set()).add(layer)
    for token, layers in decode_layers.items():
        if layers != set(range(num_layers)):
            raise SchemaValidationError(f"decode step {token} missing layers")


def _write_trace(config, events, num_layers, num_experts, top_k) -> Path:
    output = Path(config.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "model_name": config.model,
        "num_layers": num_layers,
        "num_experts": num_experts,
        "top_k": top_k,
    }
    # write to a temp file first so a failure never leaves a partial trace
    fd, tmp_name = tempfile.mkstemp(dir=output.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            for seq_id, phase, step, layer, experts in events:
                record = {
                    "seq_id": seq_id,
                    "phase": phase,
                    "step": step,
                    "layer": layer,
                    "experts": list(experts),
                }
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        os.replace(tmp_name, output)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return output
