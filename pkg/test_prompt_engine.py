# test_prompt_engine.py

from types import SimpleNamespace

import numpy as np
import pytest

from src import tensor_autodiff as ad
from src.errors import ContractError, InputError, ShapeError
from src.missing_sim import drop_modality, stack_stream
from src.models import (
    CommonProjector,
    DynamicOp,
    GeneratorKind,
    MissingType,
    ModalityKind,
    ModalMode,
    Variant,
    prompts_for_variant,
)
from src.prompt_engine import (
    BottleneckParams,
    PromptBank,
    assemble,
    bottleneck_hidden,
    bottleneck_mlp,
    common_prompts,
    correlated_chain,
    dynamic_prompt,
    route,
)
from src.tensor_autodiff import Tensor, finite_diff_check

TEXT, IMAGE = ModalityKind.TEXT, ModalityKind.IMAGE


def embedded_pair(backbone, batch):
    return {
        s: backbone.embed(s, stack_stream(batch, s)) if stack_stream(batch, s).present else None
        for s in (TEXT, IMAGE)
    }


@pytest.mark.parametrize("width, reduction, hidden", [(128, 16, 8), (128, 4, 32), (8, 16, 1)])
def test_bottleneck_hidden(width, reduction, hidden):
    assert bottleneck_hidden(width, reduction) == hidden


def test_bottleneck_with_zero_weights_is_zero():
    params = BottleneckParams(
        fc1=Tensor(np.zeros((6, 2))), fc1_b=Tensor(np.zeros(2)),
        fc2=Tensor(np.zeros((2, 4))), fc2_b=Tensor(np.zeros(4)),
        ln_g=Tensor(np.ones(4)), ln_b=Tensor(np.zeros(4)),
    )
    out = bottleneck_mlp(params, Tensor(np.ones((3, 6))))
    np.testing.assert_allclose(out.numpy(), np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        bottleneck_mlp(params, Tensor(np.ones((3, 5))))


def test_bank_names_and_init(bank, encoder):
    names = set(bank.params)
    for m in MissingType:
        for stream in ("text", "image"):
            assert f"{m.value}.{stream}.correlated.0" in names
            assert f"{m.value}.{stream}.chain.1.fc1" in names
            assert f"{m.value}.{stream}.dynamic.queries" in names
            assert f"{m.value}.{stream}.common.fc1" in names
        assert f"{m.value}.common.prompt" in names

    chain_in = bank["complete.text.chain.1.fc1"].shape[0]
    assert chain_in == 2 * encoder.d_model
    np.testing.assert_array_equal(bank["complete.text.chain.1.ln_g"].numpy(), 1.0)
    np.testing.assert_array_equal(bank["complete.text.chain.1.fc1_b"].numpy(), 0.0)
    assert all(t.requires_grad for _, t in bank)


def test_bank_is_seeded(micro_config, encoder):
    a = PromptBank(micro_config.prompts, encoder, seed=3)
    b = PromptBank.build(micro_config.prompts, encoder, seed=3)
    for name, t in a:
        np.testing.assert_array_equal(t.numpy(), b[name].numpy())


def test_chain_depth_one_is_free_prompts(micro_config, encoder):
    shallow = encoder.model_copy(update={"prompt_depth": 1})
    bank = PromptBank(micro_config.prompts, shallow)
    chain = correlated_chain(bank, MissingType.COMPLETE)
    assert chain[TEXT] == [bank["complete.text.correlated.0"]]
    assert not any(".chain." in name for name in bank.params)


@pytest.mark.parametrize("generator", [GeneratorKind.NONE, GeneratorKind.FC, GeneratorKind.MLP])
@pytest.mark.parametrize("mode", [ModalMode.UNI, ModalMode.BI])
def test_chain_shapes(micro_config, encoder, generator, mode):
    prompts = micro_config.prompts.model_copy(update={"generator": generator, "modal_mode": mode})
    bank = PromptBank(prompts, encoder)
    chain = correlated_chain(bank, MissingType.MISSING_IMAGE)
    for stream in (TEXT, IMAGE):
        assert len(chain[stream]) == encoder.prompt_depth
        assert all(p.shape == (prompts.correlated_length, encoder.d_model) for p in chain[stream])


def test_uni_mode_keeps_streams_apart(micro_config, encoder):
    prompts = micro_config.prompts.model_copy(update={"modal_mode": ModalMode.UNI})
    bank = PromptBank(prompts, encoder)
    before = correlated_chain(bank, MissingType.COMPLETE)[TEXT][1].numpy().copy()
    bank["complete.image.correlated.0"].data += 1.0
    after = correlated_chain(bank, MissingType.COMPLETE)[TEXT][1].numpy()
    np.testing.assert_array_equal(before, after)


def test_bi_mode_couples_streams(bank):
    before = correlated_chain(bank, MissingType.COMPLETE)[TEXT][1].numpy().copy()
    bank["complete.image.correlated.0"].data += 1.0
    after = correlated_chain(bank, MissingType.COMPLETE)[TEXT][1].numpy()
    assert not np.allclose(before, after)


def test_chain_is_sample_independent(backbone, bank, samples):
    for m in MissingType:
        reference = None
        for sample in samples:
            batch = [sample if m is MissingType.COMPLETE else drop_modality(sample, m)]
            x0 = embedded_pair(backbone, batch)
            assembled = assemble(bank, m, x0[TEXT], x0[IMAGE])
            deep = {s: [p.numpy().tobytes() for p in ps] for s, ps in assembled.deep_correlated.items()}
            if reference is None:
                reference = deep
            assert deep == reference


@pytest.mark.parametrize("op", list(DynamicOp))
def test_dynamic_prompt_fixed_length(micro_config, encoder, op, rng):
    prompts = micro_config.prompts.model_copy(update={"dynamic_op": op})
    bank = PromptBank(prompts, encoder)
    for length in (3, 7):
        x0 = Tensor(rng.normal(size=(length, encoder.d_model)))
        out = dynamic_prompt(bank, MissingType.COMPLETE, TEXT, x0)
        assert out.shape == (prompts.dynamic_length, encoder.d_model)

    batched = dynamic_prompt(bank, MissingType.COMPLETE, IMAGE, Tensor(rng.normal(size=(3, 5, encoder.d_model))))
    assert batched.shape == (3, prompts.dynamic_length, encoder.d_model)


@pytest.mark.parametrize("op", list(DynamicOp))
def test_dynamic_prompt_permutation_invariant(micro_config, encoder, op, rng):
    bank = PromptBank(micro_config.prompts.model_copy(update={"dynamic_op": op}), encoder)
    x = rng.normal(size=(6, encoder.d_model))
    a = dynamic_prompt(bank, MissingType.COMPLETE, TEXT, Tensor(x)).numpy()
    b = dynamic_prompt(bank, MissingType.COMPLETE, TEXT, Tensor(x[rng.permutation(6)])).numpy()
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_dynamic_prompt_depends_on_input(bank, encoder, rng):
    a = dynamic_prompt(bank, MissingType.COMPLETE, TEXT, Tensor(rng.normal(size=(4, encoder.d_model))))
    b = dynamic_prompt(bank, MissingType.COMPLETE, TEXT, Tensor(rng.normal(size=(4, encoder.d_model))))
    assert not np.allclose(a.numpy(), b.numpy())


def test_dynamic_prompt_for_absent_stream(bank, encoder):
    with pytest.raises(ContractError):
        dynamic_prompt(bank, MissingType.MISSING_TEXT, TEXT, Tensor(np.ones((3, encoder.d_model))))


@pytest.mark.parametrize("projector", list(CommonProjector))
def test_common_prompts_shapes(micro_config, encoder, projector):
    bank = PromptBank(micro_config.prompts.model_copy(update={"common_projector": projector}), encoder)
    text, image = common_prompts(bank, MissingType.COMPLETE)
    assert text.shape == image.shape == (micro_config.prompts.common_length, encoder.d_model)
    assert not np.allclose(text.numpy(), image.numpy())


def test_common_prompt_gradients(bank):
    shared = bank["complete.common.prompt"]
    weight = bank["complete.text.common.fc1"]

    def f():
        text, image = common_prompts(bank, MissingType.COMPLETE)
        return (text * image).sum()

    assert finite_diff_check(f, [shared, weight]) < 1e-6


def test_assemble_complete_and_missing(backbone, bank, samples, micro_config):
    total = micro_config.prompts.total_length
    x0 = embedded_pair(backbone, samples[:2])
    assembled = assemble(bank, MissingType.COMPLETE, x0[TEXT], x0[IMAGE])
    assert set(assembled.input_prompts) == {TEXT, IMAGE}
    assert assembled.input_prompts[TEXT].shape == (2, total, backbone.config.d_model)
    layers = assembled.layer_prompts(IMAGE, backbone.config.prompt_depth)
    assert layers[1].shape == (2, micro_config.prompts.correlated_length, backbone.config.d_model)

    missing_text = [drop_modality(s, MissingType.MISSING_TEXT) for s in samples[:2]]
    x0 = embedded_pair(backbone, missing_text)
    assembled = assemble(bank, MissingType.MISSING_TEXT, None, x0[IMAGE])
    assert set(assembled.input_prompts) == {IMAGE}
    assert "missing_text.text.correlated.0" in bank.params
    with pytest.raises(ContractError):
        assembled.layer_prompts(TEXT, backbone.config.prompt_depth)


def test_assemble_presence_mismatch(backbone, bank, samples):
    x0 = embedded_pair(backbone, samples[:1])
    with pytest.raises(ContractError):
        assemble(bank, MissingType.MISSING_IMAGE, x0[TEXT], x0[IMAGE])
    with pytest.raises(ContractError):
        assemble(bank, MissingType.COMPLETE, x0[TEXT], None)


def test_route():
    payload = np.zeros(1)
    assert route(SimpleNamespace(index=0, text_tokens=payload, image_patches=payload)) is MissingType.COMPLETE
    assert route(SimpleNamespace(index=0, text_tokens=None, image_patches=payload)) is MissingType.MISSING_TEXT
    assert route(SimpleNamespace(index=0, text_tokens=payload, image_patches=None)) is MissingType.MISSING_IMAGE
    with pytest.raises(InputError):
        route(SimpleNamespace(index=0, text_tokens=None, image_patches=None))


def test_missing_types_are_isolated(backbone, bank, samples):
    batch = [drop_modality(s, MissingType.MISSING_TEXT) for s in samples[:3]]
    with ad.Graph() as graph:
        graph.backward(backbone.forward_batch(batch, MissingType.MISSING_TEXT, bank).sum())
    for m in (MissingType.COMPLETE, MissingType.MISSING_IMAGE):
        assert all(t.grad is None for t in bank.params_for(m).values())
    assert bank["missing_text.image.dynamic.queries"].grad is not None


def test_independent_variant_has_no_generators(micro_config, encoder):
    independent = prompts_for_variant(Variant.MMP_INDEPENDENT, micro_config.prompts)
    assert independent.total_length == micro_config.prompts.total_length
    bank = PromptBank(independent, encoder)
    assert not any(k in name for name in bank.params for k in (".chain.", ".dynamic.", ".common"))


def test_bank_save_and_load(tmp_path, bank, micro_config, encoder):
    bank.save(tmp_path / "bank")
    other = PromptBank(micro_config.prompts, encoder, seed=7)
    other.load(tmp_path / "bank")
    for name, t in bank:
        np.testing.assert_array_equal(other[name].numpy(), t.numpy())

    smaller = PromptBank(micro_config.prompts.model_copy(update={"common_length": 0}), encoder)
    with pytest.raises(InputError):
        smaller.load(tmp_path / "bank")
