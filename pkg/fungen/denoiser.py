"""
Conditional denoiser.

A pre-LayerNorm transformer that predicts clean tokens from a partly masked
sequence. Annotation embeddings are summed into a condition vector that sets a
shift, scale and gate around each self-attention and feed-forward sub-layer.
A motif steers the model through a trainable copy of the first blocks whose
outputs enter the main blocks through zero-initialized projections, and
backbone features are read by cross-attention in the final block.

Every conditioning path starts out inert: zero-initialized heads, projections
and null embeddings make a freshly initialized model ignore its conditions
(the gate head aside when it starts from ones).
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import TENSOR_GROUPS, DenoiserConfig
from .errors import LengthMismatch, SequenceTooLong
from .seqcore import ANNOTATION_TYPES, MASK_ID, VOCAB_SIZE, AnnotationSet, ConditionBundle, Sequence
from .structure import FEATURE_DIM, featurize_structure
from .utils import make_torch_generator

logger = logging.getLogger(__name__)


@dataclass
class ConditionTensors:
    """
    A batch of condition bundles in tensor form.

    annotations maps each type to a [B, n_type] multi-hot matrix; present is
    [B, 3] with 1 where that type holds at least one label. Motif ids are the
    mask-padded motif sequence. Presence factors are [B, 1, 1].
    """

    annotations: dict
    present: torch.Tensor
    motif_ids: torch.Tensor
    motif_present: torch.Tensor
    structure: torch.Tensor
    structure_present: torch.Tensor

    def to(self, dtype: torch.dtype) -> "ConditionTensors":
        return ConditionTensors(
            annotations={kind: value.to(dtype) for kind, value in self.annotations.items()},
            present=self.present.to(dtype),
            motif_ids=self.motif_ids,
            motif_present=self.motif_present.to(dtype),
            structure=self.structure.to(dtype),
            structure_present=self.structure_present.to(dtype),
        )

    def index(self, rows) -> "ConditionTensors":
        return ConditionTensors(
            annotations={kind: value[rows] for kind, value in self.annotations.items()},
            present=self.present[rows],
            motif_ids=self.motif_ids[rows],
            motif_present=self.motif_present[rows],
            structure=self.structure[rows],
            structure_present=self.structure_present[rows],
        )

    @property
    def has_motif(self) -> bool:
        return bool(self.motif_present.any())

    @property
    def has_structure(self) -> bool:
        return bool(self.structure_present.any())


def collate_sequences(seqs, length: Optional[int] = None) -> tuple:
    """
    Pad sequences into a batch.

    Returns:
        tuple: (ids [B, L] long padded with the mask id, valid [B, L] bool)
    """
    length = length or max(len(seq) for seq in seqs)
    ids = torch.full((len(seqs), length), MASK_ID, dtype=torch.long)
    valid = torch.zeros((len(seqs), length), dtype=torch.bool)
    for row, seq in enumerate(seqs):
        ids[row, : len(seq)] = torch.as_tensor(seq.ids, dtype=torch.long)
        valid[row, : len(seq)] = True
    return ids, valid


def condition_batch(bundles, length: int, sizes: dict, feature_cache: Optional[dict] = None) -> ConditionTensors:
    """
    Collate condition bundles for a batch padded to length.

    Args:
        bundles: One ConditionBundle per row
        length: Padded sequence length
        sizes: Registry sizes {"go": n, "ipr": n, "ec": n}
        feature_cache: Structure features keyed by id(structure), filled on first use

    Returns:
        ConditionTensors: Float32 tensors

    Raises:
        UnknownLabel: An annotation id outside its registry
        LengthMismatch: A structure longer than the padded length
    """
    n_rows = len(bundles)
    annotations = {kind: torch.zeros(n_rows, sizes.get(kind, 0)) for kind in ANNOTATION_TYPES}
    present = torch.zeros(n_rows, len(ANNOTATION_TYPES))
    motif_ids = torch.full((n_rows, length), MASK_ID, dtype=torch.long)
    motif_present = torch.zeros(n_rows, 1, 1)
    structure = torch.zeros(n_rows, length, FEATURE_DIM)
    structure_present = torch.zeros(n_rows, 1, 1)

    for row, bundle in enumerate(bundles):
        if bundle.annotations is not None:
            bundle.annotations.validate(sizes)
            for column, kind in enumerate(ANNOTATION_TYPES):
                labels = sorted(bundle.annotations.get(kind))
                if labels:
                    annotations[kind][row, labels] = 1.0
                    present[row, column] = 1.0
        if bundle.motif is not None and bundle.motif.spans:
            bundle.motif.check_fits(length)
            for position, token in bundle.motif.residue_positions():
                motif_ids[row, position] = token
            motif_present[row] = 1.0
        if bundle.structure is not None:
            if len(bundle.structure) > length:
                raise LengthMismatch(len(bundle.structure), length)
            if feature_cache is None:
                features = featurize_structure(bundle.structure)
            else:
                key = id(bundle.structure)
                if key not in feature_cache:
                    feature_cache[key] = featurize_structure(bundle.structure)
                features = feature_cache[key]
            structure[row, : len(features)] = features.tensor()
            structure_present[row] = 1.0

    return ConditionTensors(annotations, present, motif_ids, motif_present, structure, structure_present)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        batch, length, width = x.shape
        head_dim = width // self.n_heads
        q, k, v = self.qkv(x).view(batch, length, 3, self.n_heads, head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ v
        return self.out(attended.transpose(1, 2).reshape(batch, length, width))


class CrossAttention(nn.Module):
    """Queries from the sequence stream, keys and values from projected backbone features."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.query = nn.Linear(d_model, d_model)
        self.key_value = nn.Linear(d_model, 2 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        batch, length, width = x.shape
        head_dim = width // self.n_heads
        q = self.query(x).view(batch, length, self.n_heads, head_dim).transpose(1, 2)
        k, v = self.key_value(memory).view(batch, memory.shape[1], 2, self.n_heads, head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ v
        return self.out(attended.transpose(1, 2).reshape(batch, length, width))


class DenoiserBlock(nn.Module):
    """Pre-LN transformer block with annotation-guided feature modulation."""

    def __init__(self, config: DenoiserConfig, cross_attention: bool = False):
        super().__init__()
        d_model = config.d_model
        self.literal = config.agfm_literal
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False)
        self.attn = SelfAttention(d_model, config.n_heads)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False)
        self.ffn = nn.Sequential(nn.Linear(d_model, config.d_ff), nn.GELU(), nn.Linear(config.d_ff, d_model))
        # shift, scale and gate for the attention sub-layer, then for the feed-forward sub-layer
        self.mod = nn.Linear(d_model, 6 * d_model)
        self.norm_cross = nn.LayerNorm(d_model, elementwise_affine=False) if cross_attention else None
        self.cross_attn = CrossAttention(d_model, config.n_heads) if cross_attention else None

    def modulation(self, cond: torch.Tensor) -> dict:
        """Split the modulation output into {sublayer: (shift, scale, gate)}, each [B, 1, d]."""
        chunks = self.mod(cond)[:, None, :].chunk(6, dim=-1)
        return {"sa": chunks[0:3], "ff": chunks[3:6]}

    def modulate(self, x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
        if self.literal:
            return scale * x + shift
        return x * (1 + scale) + shift

    @staticmethod
    def gate(h: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        return alpha * h + h

    def forward(self, x: torch.Tensor, cond: torch.Tensor, valid: torch.Tensor,
                memory: Optional[torch.Tensor] = None, memory_valid: Optional[torch.Tensor] = None,
                memory_present: Optional[torch.Tensor] = None) -> torch.Tensor:
        mods = self.modulation(cond)

        shift, scale, alpha = mods["sa"]
        x = x + self.gate(self.attn(self.modulate(self.norm1(x), shift, scale), valid), alpha)

        if self.cross_attn is not None and memory is not None:
            x = x + self.cross_attn(self.norm_cross(x), memory, memory_valid) * memory_present

        shift, scale, alpha = mods["ff"]
        x = x + self.gate(self.ffn(self.modulate(self.norm2(x), shift, scale)), alpha)
        return x


def _group_of(name: str) -> str:
    if name.startswith(("control_blocks.", "f_in.", "f_out.")):
        return "rcfe"
    if name.startswith(("annotation_tables.", "null_embeddings")) or ".mod." in name:
        return "agfm"
    if name.startswith(("token_embedding.", "position_embedding.")):
        return "embeddings"
    if name.startswith("structure_proj.") or ".cross_attn." in name or ".norm_cross." in name:
        return "structure"
    if ".attn." in name or ".norm1." in name:
        return "attention"
    if ".ffn." in name or ".norm2." in name:
        return "ffn"
    return "head"


class Denoiser(nn.Module):
    """
    Predicts clean-token logits from x_t and a condition batch.

    Built by init_params; the constructor only allocates parameters.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d_model = config.d_model
        n_blocks = config.n_blocks

        self.token_embedding = nn.Embedding(VOCAB_SIZE, d_model)
        self.position_embedding = nn.Embedding(config.max_len, d_model)
        self.annotation_tables = nn.ParameterDict({
            kind: nn.Parameter(torch.empty(size, d_model)) for kind, size in config.registry_sizes().items()
        })
        self.null_embeddings = nn.Parameter(torch.zeros(len(ANNOTATION_TYPES), d_model))

        self.blocks = nn.ModuleList([
            DenoiserBlock(config, cross_attention=config.structure_enabled and index == n_blocks - 1)
            for index in range(n_blocks)
        ])

        self.control_blocks = nn.ModuleList([DenoiserBlock(config) for _ in range(config.control_blocks)])
        self.f_in = nn.Linear(d_model, d_model) if config.control_blocks else None
        self.f_out = nn.ModuleList([nn.Linear(d_model, d_model) for _ in range(config.control_blocks)])

        self.structure_proj = nn.Linear(FEATURE_DIM, d_model) if config.structure_enabled else None

        self.final_norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, VOCAB_SIZE)

    @property
    def sizes(self) -> dict:
        return self.config.registry_sizes()

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def reset_parameters(self, generator: torch.Generator) -> None:
        """Scaled-uniform weights, then the zero and ones rules of every conditioning path."""
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.startswith("control_blocks.") or name.startswith(("f_in.", "f_out.")):
                    continue
                if name.endswith(".bias"):
                    param.zero_()
                elif param.dim() == 1:
                    param.fill_(1.0)
                else:
                    bound = 1.0 / math.sqrt(param.shape[-1])
                    param.uniform_(-bound, bound, generator=generator)

            self.null_embeddings.zero_()
            d_model = self.config.d_model
            gate_value = 1.0 if self.config.agfm_alpha_init == "ones" else 0.0
            for block in self.blocks:
                block.mod.weight.zero_()
                block.mod.bias.zero_()
                block.mod.weight[2 * d_model: 3 * d_model].fill_(gate_value)
                block.mod.weight[5 * d_model: 6 * d_model].fill_(gate_value)
                if block.cross_attn is not None:
                    block.cross_attn.out.weight.zero_()
                    block.cross_attn.out.bias.zero_()

            for source, control in zip(self.blocks, self.control_blocks):
                state = {key: value for key, value in source.state_dict().items() if "cross" not in key}
                control.load_state_dict(state)
            if self.f_in is not None:
                self.f_in.weight.zero_()
                self.f_in.bias.zero_()
            for projection in self.f_out:
                projection.weight.zero_()
                projection.bias.zero_()

    def parameter_groups(self) -> dict:
        """{group: [(name, parameter), ...]} over all tensor groups, in registration order."""
        groups = {group: [] for group in TENSOR_GROUPS}
        for name, param in self.named_parameters():
            groups[_group_of(name)].append((name, param))
        return groups

    def freeze(self, groups) -> None:
        """Turn off gradients for the named tensor groups and on for the rest."""
        groups = set(groups)
        for group, members in self.parameter_groups().items():
            for _, param in members:
                param.requires_grad_(group not in groups)
        if groups:
            logger.info(f"Frozen tensor groups: {sorted(groups)}")

    def embed(self, x_t: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(x_t.shape[1], device=x_t.device)
        return self.token_embedding(x_t) + self.position_embedding(positions)[None]

    def embed_conditions(self, cond: ConditionTensors) -> torch.Tensor:
        """Sum of annotation embeddings per row; a type without labels contributes its null embedding."""
        total = 0
        for column, kind in enumerate(ANNOTATION_TYPES):
            labelled = cond.annotations[kind] @ self.annotation_tables[kind]
            absent = (1 - cond.present[:, column: column + 1]) * self.null_embeddings[column]
            total = total + labelled + absent
        return total

    def structure_memory(self, cond: ConditionTensors, valid: torch.Tensor) -> tuple:
        positions = torch.arange(cond.structure.shape[1], device=cond.structure.device)
        memory = self.structure_proj(cond.structure) + self.position_embedding(positions)[None]
        # rows without a structure attend over every position of a zero memory and are then scaled by 0
        memory_valid = valid | (cond.structure_present[:, :, 0] == 0)
        return memory, memory_valid

    def forward(self, x_t: torch.Tensor, cond: ConditionTensors, valid: Optional[torch.Tensor] = None,
                use_control: bool = True, use_structure: bool = True) -> torch.Tensor:
        """
        Args:
            x_t: [B, L] token ids
            cond: Collated conditions for the same batch
            valid: [B, L] bool, False on padding
            use_control: Run the motif branch when a motif is present
            use_structure: Run structure cross-attention when a structure is present

        Returns:
            torch.Tensor: [B, L, 21] logits, mask column at -inf
        """
        if x_t.shape[1] > self.config.max_len:
            raise SequenceTooLong(x_t.shape[1], self.config.max_len)
        if valid is None:
            valid = torch.ones_like(x_t, dtype=torch.bool)
        cond = cond.to(self.dtype)

        h = self.embed(x_t)
        cond_vec = self.embed_conditions(cond)

        memory = memory_valid = None
        if use_structure and self.structure_proj is not None and cond.has_structure:
            memory, memory_valid = self.structure_memory(cond, valid)
        structure = (memory, memory_valid, cond.structure_present)

        n_control = len(self.control_blocks)
        if use_control and n_control and cond.has_motif:
            motif_embedding = self.token_embedding(cond.motif_ids)
            h = rcfe_forward(self, h, motif_embedding, cond_vec, valid, cond.motif_present, structure)
        else:
            for block in self.blocks[:n_control]:
                h = block(h, cond_vec, valid, *structure)

        for block in self.blocks[n_control:]:
            h = block(h, cond_vec, valid, *structure)

        logits = self.head(self.final_norm(h))
        mask_column = torch.arange(VOCAB_SIZE, device=logits.device) == MASK_ID
        return logits.masked_fill(mask_column, float("-inf"))


def init_params(config: DenoiserConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Denoiser:
    """
    Build a denoiser with deterministic initial weights.

    Args:
        config: Model shape and conditioning switches
        seed: Seed for the scaled-uniform draws
        dtype: Parameter dtype; float64 is used for gradient checks

    Returns:
        Denoiser: Model in eval mode
    """
    model = Denoiser(config)
    model.reset_parameters(make_torch_generator(seed))
    model.to(dtype)
    model.eval()
    logger.debug(f"Initialized denoiser with {sum(p.numel() for p in model.parameters())} parameters")
    return model


def embed_conditions(anno: Optional[AnnotationSet], model: Denoiser) -> torch.Tensor:
    """
    Pre-modulation condition vector for one annotation set.

    Raises:
        UnknownLabel: An id outside the model's registries
    """
    cond = condition_batch([ConditionBundle(annotations=anno)], 1, model.sizes).to(model.dtype)
    return model.embed_conditions(cond)[0]


def agfm_modulate(x: torch.Tensor, cond: torch.Tensor, block: DenoiserBlock, sublayer: str = "sa") -> tuple:
    """
    Modulated, normalized input of a sub-layer and its gate.

    Args:
        x: [L, d] or [B, L, d] features
        cond: [d] or [B, d] condition vector
        block: Block whose modulation layer is used
        sublayer: "sa" or "ff"

    Returns:
        tuple: (modulated features, alpha); apply block.gate(sublayer_output, alpha) afterwards
    """
    squeeze = x.dim() == 2
    if squeeze:
        x, cond = x[None], cond[None]
    shift, scale, alpha = block.modulation(cond)[sublayer]
    norm = block.norm1 if sublayer == "sa" else block.norm2
    modulated = block.modulate(norm(x), shift, scale)
    if squeeze:
        return modulated[0], alpha[0]
    return modulated, alpha


def rcfe_forward(model: Denoiser, x: torch.Tensor, motif_embedding: torch.Tensor, cond_vec: torch.Tensor,
                 valid: torch.Tensor, motif_present: Optional[torch.Tensor] = None,
                 structure: tuple = (None, None, None)) -> torch.Tensor:
    """
    Run the main blocks covered by the control branch, adding its residuals.

    The control branch starts from x + F_in(motif_embedding); after each control
    block its output passes through that block's F_out and is added to the
    output of the matching main block.

    Args:
        model: Denoiser with at least one control block
        x: [B, L, d] embedded input
        motif_embedding: [B, L, d] token embedding of the mask-padded motif sequence
        cond_vec: [B, d] condition vectors
        valid: [B, L] bool
        motif_present: [B, 1, 1] factor, 0 for rows without a motif
        structure: (memory, memory_valid, structure_present) for a main block that holds cross-attention

    Returns:
        torch.Tensor: Hidden state after the first len(model.control_blocks) main blocks
    """
    if motif_present is None:
        motif_present = torch.ones(x.shape[0], 1, 1, dtype=x.dtype)
    control = x + model.f_in(motif_embedding)
    h = x
    for block, control_block, projection in zip(model.blocks, model.control_blocks, model.f_out):
        h = block(h, cond_vec, valid, *structure)
        control = control_block(control, cond_vec, valid)
        h = h + projection(control) * motif_present
    return h


def denoise_logits(model: Denoiser, x_t: Sequence, bundle: ConditionBundle) -> torch.Tensor:
    """
    Logits for one sequence under one condition bundle.

    Returns:
        torch.Tensor: [L, 21]

    Raises:
        UnknownLabel: Annotation ids outside the model's registries
    """
    ids, valid = collate_sequences([x_t])
    cond = condition_batch([bundle], len(x_t), model.sizes)
    with torch.no_grad():
        return model(ids, cond, valid)[0]


def parameter_bytes(model: Denoiser) -> bytes:
    """Concatenated little-endian bytes of every tensor in state-dict order."""
    return b"".join(
        np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4").tobytes()
        for tensor in model.state_dict().values()
    )


def softmax_rows(logits: torch.Tensor) -> np.ndarray:
    """Float64 probabilities from logits with the mask column at -inf."""
    return torch.softmax(logits.detach().to(torch.float64), dim=-1).numpy()
