import numpy as np
import pytest

from motif_cdr.autodiff import ParamStore, Tensor, grad_check
from motif_cdr.errors import DimensionError, RoutingError
from motif_cdr.motifs import Context
from motif_cdr.objectives import in_batch, infonce
from motif_cdr.readout import PromptMode, PromptParams, assemble_node_embedding, readout_prompted
from motif_cdr.transformer import (MoDELayer, RouteTag, TransformerVariant, build_layers, encode_motif,
                                   mode_layer_forward)

D = 8


@pytest.fixture
def layers():
    store = ParamStore()
    return build_layers(store, 2, D, 2, [0, 1], np.random.default_rng(0))


@pytest.fixture
def motif():
    return Tensor(np.random.default_rng(1).normal(size=(4, D)))


def np_layer_norm(x):
    centered = x - x.mean(axis=-1, keepdims=True)
    return centered / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + 1e-5)


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


class TestModeLayer:
    def test_zero_weights_pass_through(self, layers, motif):
        store = layers[0].store
        for name, tensor in store.items():
            if ".attn." in name or ".expert." in name:
                tensor.data = np.zeros_like(tensor.data)
        out = encode_motif(motif, layers, RouteTag.specific(1))
        np.testing.assert_allclose(out.data, motif.data, atol=1e-12)

    def test_single_row_matches_closed_form(self, layers):
        layer = layers[0]
        x = np.random.default_rng(2).normal(size=(1, D))
        p = {name: layer.param(name).data for name in (
            "attn.wv", "attn.wo", "expert.shared.w1", "expert.shared.b1", "expert.shared.w2", "expert.shared.b2")}
        attended = np_layer_norm(x) @ p["attn.wv"] @ p["attn.wo"] + x
        hidden = np_gelu(np_layer_norm(attended) @ p["expert.shared.w1"] + p["expert.shared.b1"])
        expected = hidden @ p["expert.shared.w2"] + p["expert.shared.b2"] + attended
        out = mode_layer_forward(Tensor(x), layer, RouteTag.shared())
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_permutation_equivariance(self, layers, motif):
        perm = np.array([2, 0, 3, 1])
        route = RouteTag.specific(0)
        direct = encode_motif(motif, layers, route).data
        permuted = encode_motif(Tensor(motif.data[perm]), layers, route).data
        np.testing.assert_allclose(permuted, direct[perm], atol=1e-10)

    def test_batched_equals_single(self, layers):
        batch = np.random.default_rng(3).normal(size=(3, 4, D))
        out = encode_motif(Tensor(batch), layers, RouteTag.shared()).data
        for k in range(3):
            single = encode_motif(Tensor(batch[k]), layers, RouteTag.shared()).data
            np.testing.assert_allclose(out[k], single, atol=1e-10)


class TestRouting:
    def test_expert_touches_only_its_route(self, layers, motif):
        before_0 = encode_motif(motif, layers, RouteTag.specific(0)).data
        before_shared = encode_motif(motif, layers, RouteTag.shared()).data
        before_1 = encode_motif(motif, layers, RouteTag.specific(1)).data
        for layer in layers:
            w = layer.param("expert.d1.w2")
            w.data = w.data + 1.0
        np.testing.assert_array_equal(encode_motif(motif, layers, RouteTag.specific(0)).data, before_0)
        np.testing.assert_array_equal(encode_motif(motif, layers, RouteTag.shared()).data, before_shared)
        assert not np.allclose(encode_motif(motif, layers, RouteTag.specific(1)).data, before_1)

    def test_vanilla_uses_shared_expert(self, layers, motif):
        shared = encode_motif(motif, layers, RouteTag.shared()).data
        vanilla = encode_motif(motif, layers, RouteTag.specific(1), TransformerVariant.VANILLA).data
        np.testing.assert_array_equal(vanilla, shared)

    def test_none_variant_is_identity(self, layers, motif):
        assert encode_motif(motif, layers, RouteTag.shared(), TransformerVariant.NONE) is motif

    def test_unknown_domain(self, layers, motif):
        with pytest.raises(RoutingError):
            mode_layer_forward(motif, layers[0], RouteTag.specific(7))

    def test_specific_route_needs_domain(self):
        with pytest.raises(RoutingError):
            RouteTag(Context.SPECIFIC)

    def test_expert_names(self, layers):
        assert layers[0].expert_names() == ("shared", "d0", "d1")


class TestShapes:
    def test_heads_must_divide_d(self):
        with pytest.raises(DimensionError):
            MoDELayer(ParamStore(), "mode.0", 8, 3, [0])

    def test_width_mismatch(self, layers):
        with pytest.raises(DimensionError):
            mode_layer_forward(Tensor(np.ones((2, D + 1))), layers[0], RouteTag.shared())

    def test_attach_reuses_parameters(self, layers):
        attached = build_layers(layers[0].store, 2, D, 2, [0, 1])
        assert attached[1].param("attn.wq") is layers[1].param("attn.wq")


class TestComposedGradient:
    @pytest.mark.parametrize("seed", range(10))
    def test_encoder_readout_infonce(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        layers = build_layers(store, 1, D, 2, [0], rng)
        prompts = PromptParams.create(store, "prompt.d0.specific", D, PromptMode.ELEMENTWISE)
        motifs = store.add("motifs", rng.normal(size=(3, 4, D)))
        targets = Tensor(rng.normal(size=(3, 2 * D)))

        def f():
            encoded = encode_motif(motifs, layers, RouteTag.specific(0))
            z = readout_prompted(encoded, prompts)
            emb = assemble_node_embedding(z, motifs[:, 0, :], prompts.p_out)
            return infonce(in_batch(emb, targets, 0.5))
        assert grad_check(f, store, max_coords=6, seed=seed) < 1e-4
