import numpy as np
import pytest
import torch

from fungen.denoiser import (
    agfm_modulate,
    collate_sequences,
    condition_batch,
    denoise_logits,
    embed_conditions,
    init_params,
    parameter_bytes,
    rcfe_forward,
    softmax_rows,
)
from fungen.errors import LengthMismatch, SequenceTooLong, UnknownLabel
from fungen.seqcore import MASK_ID, AnnotationSet, BackboneStructure, ConditionBundle, MotifSpec, Sequence
from fungen.structure import ideal_helix

from .conftest import random_sequence


def _forward(model, seq, bundle, **kwargs):
    ids, valid = collate_sequences([seq])
    cond = condition_batch([bundle], len(seq), model.sizes)
    with torch.no_grad():
        return model(ids, cond, valid, **kwargs)[0]


def _partly_masked(rng, length=20):
    ids = random_sequence(rng, length).to_array()
    ids[rng.random(length) < 0.5] = MASK_ID
    return Sequence.from_array(ids)


def test_init_rules(tiny_model, tiny_config):
    d = tiny_config.d_model
    for block in tiny_model.blocks:
        weight = block.mod.weight.detach()
        assert torch.all(block.mod.bias == 0)
        for chunk in (0, 1, 3, 4):
            assert torch.all(weight[chunk * d: (chunk + 1) * d] == 0)
        for chunk in (2, 5):
            assert torch.all(weight[chunk * d: (chunk + 1) * d] == 1)
    assert torch.all(tiny_model.f_in.weight == 0) and torch.all(tiny_model.f_in.bias == 0)
    for projection in tiny_model.f_out:
        assert torch.all(projection.weight == 0) and torch.all(projection.bias == 0)
    assert torch.all(tiny_model.null_embeddings == 0)
    cross = tiny_model.blocks[-1].cross_attn
    assert torch.all(cross.out.weight == 0) and torch.all(cross.out.bias == 0)
    assert tiny_model.blocks[0].cross_attn is None


def test_alpha_zeros_init(tiny_config):
    model = init_params(tiny_config.model_copy(update={"agfm_alpha_init": "zeros"}))
    for block in model.blocks:
        assert torch.all(block.mod.weight == 0)


def test_control_blocks_copy_main_blocks(tiny_model):
    assert len(tiny_model.control_blocks) == 1
    main = tiny_model.blocks[0].state_dict()
    for name, value in tiny_model.control_blocks[0].state_dict().items():
        assert torch.equal(value, main[name])


def test_init_deterministic(tiny_config):
    assert parameter_bytes(init_params(tiny_config, seed=3)) == parameter_bytes(init_params(tiny_config, seed=3))
    assert parameter_bytes(init_params(tiny_config, seed=3)) != parameter_bytes(init_params(tiny_config, seed=4))


def test_rcfe_identity_at_init(tiny_model, rng):
    seq = _partly_masked(rng)
    bundle = ConditionBundle(AnnotationSet(go={1}), MotifSpec.from_strings([(3, 8, "ACDEF")]))
    with_control = _forward(tiny_model, seq, bundle)
    without_control = _forward(tiny_model, seq, bundle, use_control=False)
    assert torch.equal(with_control, without_control)


def test_structure_identity_at_init(tiny_model, rng):
    seq = _partly_masked(rng)
    structure = BackboneStructure(ideal_helix(len(seq)))
    with_structure = _forward(tiny_model, seq, ConditionBundle(structure=structure))
    without_structure = _forward(tiny_model, seq, ConditionBundle())
    assert torch.equal(with_structure, without_structure)


def test_annotation_identity_with_zero_gates(tiny_config, rng):
    model = init_params(tiny_config.model_copy(update={"agfm_alpha_init": "zeros"}))
    seq = _partly_masked(rng)
    conditional = _forward(model, seq, ConditionBundle(AnnotationSet(go={0, 2}, ec={1})))
    unconditional = _forward(model, seq, ConditionBundle())
    assert torch.equal(conditional, unconditional)


def test_ones_gate_only_acts_through_condition(tiny_config, rng):
    ones = init_params(tiny_config, seed=5)
    zeros = init_params(tiny_config.model_copy(update={"agfm_alpha_init": "zeros"}), seed=5)
    seq = _partly_masked(rng)
    assert torch.equal(_forward(ones, seq, ConditionBundle()), _forward(zeros, seq, ConditionBundle()))
    anno = ConditionBundle(AnnotationSet(go={1}))
    assert not torch.equal(_forward(ones, seq, anno), _forward(zeros, seq, anno))


def test_embed_conditions(tiny_model):
    assert torch.all(embed_conditions(None, tiny_model) == 0)
    assert torch.all(embed_conditions(AnnotationSet(), tiny_model) == 0)
    single = embed_conditions(AnnotationSet(go={2}), tiny_model)
    assert torch.equal(single, tiny_model.annotation_tables["go"][2].detach())
    pair = embed_conditions(AnnotationSet(go={1, 3}), tiny_model)
    manual = tiny_model.annotation_tables["go"][1] + tiny_model.annotation_tables["go"][3]
    torch.testing.assert_close(pair, manual.detach(), atol=1e-7, rtol=0)


def test_embed_conditions_null_embeddings(tiny_model):
    with torch.no_grad():
        tiny_model.null_embeddings.copy_(torch.arange(3 * 16, dtype=torch.float32).view(3, 16))
    vector = embed_conditions(AnnotationSet(go={0}), tiny_model)
    expected = tiny_model.annotation_tables["go"][0] + tiny_model.null_embeddings[1] + tiny_model.null_embeddings[2]
    torch.testing.assert_close(vector, expected.detach())


def test_embed_conditions_unknown_label(tiny_model):
    with pytest.raises(UnknownLabel):
        embed_conditions(AnnotationSet(go={4}), tiny_model)


def test_agfm_identity_modulation(tiny_model):
    block = tiny_model.blocks[0]
    x = torch.randn(7, 16)
    cond = torch.zeros(16)
    modulated, alpha = agfm_modulate(x, cond, block, "sa")
    torch.testing.assert_close(modulated, torch.nn.functional.layer_norm(x, (16,)))
    assert torch.all(alpha == 0)
    h = torch.randn(7, 16)
    assert torch.equal(block.gate(h, alpha), h)


def test_agfm_literal_form(tiny_config):
    model = init_params(tiny_config.model_copy(update={"agfm_literal": True}))
    block = model.blocks[0]
    with torch.no_grad():
        block.mod.bias[16:32].fill_(2.0)
    x = torch.randn(5, 16)
    modulated, _ = agfm_modulate(x, torch.zeros(16), block, "sa")
    torch.testing.assert_close(modulated, 2.0 * torch.nn.functional.layer_norm(x, (16,)))


def test_agfm_gradient_finite_differences(tiny_config):
    model = init_params(tiny_config, seed=1, dtype=torch.float64)
    block = model.blocks[0]
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        block.mod.weight.add_(0.1 * torch.randn(block.mod.weight.shape, generator=generator, dtype=torch.float64))
    x = torch.randn(6, 16, generator=generator, dtype=torch.float64)
    valid = torch.ones(1, 6, dtype=torch.bool)

    def gated(cond):
        modulated, alpha = agfm_modulate(x, cond, block, "sa")
        return block.gate(block.attn(modulated[None], valid)[0], alpha)

    cond = torch.randn(16, generator=generator, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(gated, (cond,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_rcfe_changes_output_after_one_step(tiny_model, rng):
    seq = _partly_masked(rng)
    targets = torch.as_tensor(random_sequence(rng, len(seq)).to_array())
    bundle = ConditionBundle(motif=MotifSpec.from_strings([(0, 6, "WWWWWW")]))
    ids, valid = collate_sequences([seq])
    cond = condition_batch([bundle], len(seq), tiny_model.sizes)

    optimizer = torch.optim.SGD(tiny_model.parameters(), lr=0.5)
    logits = tiny_model(ids, cond, valid)[0]
    loss = torch.nn.functional.cross_entropy(logits, targets)
    loss.backward()
    optimizer.step()

    with torch.no_grad():
        with_control = tiny_model(ids, cond, valid)[0]
        without_control = tiny_model(ids, cond, valid, use_control=False)[0]
    assert (with_control - without_control).abs().max() > 0


def test_rcfe_forward_residuals(tiny_model):
    generator = torch.Generator().manual_seed(5)
    x = torch.randn(1, 6, 16, generator=generator)
    motif_embedding = torch.randn(1, 6, 16, generator=generator)
    cond_vec = torch.randn(1, 16, generator=generator)
    valid = torch.ones(1, 6, dtype=torch.bool)
    with torch.no_grad():
        plain = tiny_model.blocks[0](x, cond_vec, valid)
        torch.testing.assert_close(rcfe_forward(tiny_model, x, motif_embedding, cond_vec, valid), plain, rtol=0, atol=0)

        tiny_model.f_out[0].weight.fill_(0.1)
        steered = rcfe_forward(tiny_model, x, motif_embedding, cond_vec, valid)
        absent = rcfe_forward(tiny_model, x, motif_embedding, cond_vec, valid, torch.zeros(1, 1, 1))
    assert (steered - plain).abs().max() > 0
    torch.testing.assert_close(absent, plain, rtol=0, atol=0)


def test_logits_shape_and_mask_column(tiny_model, rng):
    seq = _partly_masked(rng, 15)
    logits = denoise_logits(tiny_model, seq, ConditionBundle(AnnotationSet(ipr={1})))
    assert logits.shape == (15, 21)
    assert torch.all(torch.isneginf(logits[:, MASK_ID]))
    assert torch.all(torch.isfinite(logits[:, :MASK_ID]))
    probs = softmax_rows(logits)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(probs[:, MASK_ID] == 0)


def test_annotation_order_irrelevant(tiny_model, rng):
    seq = _partly_masked(rng)
    a = denoise_logits(tiny_model, seq, ConditionBundle(AnnotationSet(go=[0, 3])))
    b = denoise_logits(tiny_model, seq, ConditionBundle(AnnotationSet(go=[3, 0])))
    assert torch.equal(a, b)


def test_batch_rows_independent(tiny_model, rng):
    seqs = [_partly_masked(rng, 12), _partly_masked(rng, 9)]
    bundles = [ConditionBundle(AnnotationSet(go={1})), ConditionBundle(motif=MotifSpec.from_strings([(0, 2, "AC")]))]
    ids, valid = collate_sequences(seqs)
    cond = condition_batch(bundles, ids.shape[1], tiny_model.sizes)
    with torch.no_grad():
        batched = tiny_model(ids, cond, valid)
    single = denoise_logits(tiny_model, seqs[1], bundles[1])
    torch.testing.assert_close(batched[1, :9], single, atol=1e-5, rtol=1e-5)


def test_forward_rejects_long_input(tiny_model):
    with pytest.raises(SequenceTooLong):
        denoise_logits(tiny_model, Sequence.all_mask(65), ConditionBundle())


def test_structure_longer_than_batch(tiny_model):
    bundle = ConditionBundle(structure=BackboneStructure(ideal_helix(10)))
    with pytest.raises(LengthMismatch):
        condition_batch([bundle], 8, tiny_model.sizes)


def test_parameter_groups_cover_everything(tiny_model):
    groups = tiny_model.parameter_groups()
    names = [name for members in groups.values() for name, _ in members]
    assert sorted(names) == sorted(name for name, _ in tiny_model.named_parameters())
    assert any(name.startswith("f_out") for name, _ in groups["rcfe"])
    assert any(".mod." in name for name, _ in groups["agfm"])
    assert any("cross_attn" in name for name, _ in groups["structure"])
    assert [name for name, _ in groups["head"]] == ["final_norm.weight", "final_norm.bias", "head.weight", "head.bias"]


def test_freeze(tiny_model):
    tiny_model.freeze(["embeddings", "attention"])
    groups = tiny_model.parameter_groups()
    assert all(not param.requires_grad for _, param in groups["embeddings"] + groups["attention"])
    assert all(param.requires_grad for _, param in groups["agfm"])
    tiny_model.freeze(())
    assert all(param.requires_grad for param in tiny_model.parameters())


def test_disabled_branches(tiny_config, rng):
    model = init_params(tiny_config.model_copy(update={"rcfe_enabled": False, "structure_enabled": False}))
    assert len(model.control_blocks) == 0 and model.f_in is None and model.structure_proj is None
    seq = _partly_masked(rng)
    bundle = ConditionBundle(motif=MotifSpec.from_strings([(0, 2, "AC")]),
                             structure=BackboneStructure(ideal_helix(len(seq))))
    assert torch.equal(_forward(model, seq, bundle), _forward(model, seq, ConditionBundle()))
