import numpy as np
import pytest
import scipy.sparse as sp

from motif_cdr.autodiff import ParamStore, Tensor, concat, grad_check
from motif_cdr.encoder import (MotifEncoder, NodeEmbedder, Task, compose_user_embedding,
                               layer_average)
from motif_cdr.errors import NodeLookupError, ValidationError
from motif_cdr.graph import NodeKind
from motif_cdr.motifs import Context
from motif_cdr.objectives import ViewPair, cl_loss, er_loss, mask_motif, pretrain_loss


@pytest.fixture
def encoder(tiny_split, tiny_config):
    return MotifEncoder(tiny_split.train, tiny_config)


@pytest.fixture
def embedder(encoder):
    return NodeEmbedder(encoder, encoder.build_structure(0))


class TestParameters:
    def test_table_shapes(self, encoder, tiny_split):
        assert encoder.store["emb.shared"].shape == (tiny_split.train.n_shared_rows, 8)
        for d, graph in tiny_split.train.graphs.items():
            assert encoder.store[f"emb.specific.d{d}"].shape == (graph.num_nodes, 8)
        assert encoder.store["mask_token"].shape == (8,)

    def test_same_seed_same_init(self, encoder, tiny_split, tiny_config):
        again = MotifEncoder(tiny_split.train, tiny_config).store.snapshot()
        for name, value in encoder.store.snapshot().items():
            assert np.array_equal(value, again[name]), name

    def test_prompts_start_at_identity(self, encoder):
        for (domain_id, context), prompts in encoder.prompts.items():
            assert np.array_equal(prompts.p_vec.data, np.ones(8))
        assert encoder.prompt_names(0)
        assert all(name.startswith("prompt.d0.") for name in encoder.prompt_names(0))

    def test_missing_tables_rejected(self, tiny_split, tiny_config):
        with pytest.raises(ValidationError, match="emb.shared"):
            MotifEncoder(tiny_split.train, tiny_config, store=ParamStore())


class TestStructure:
    def test_pools_for_every_domain(self, encoder):
        structure = encoder.build_structure(0)
        assert set(structure.pools) == {0, 1}
        assert structure.shared_op is not None
        assert structure.shared_op.shape == (encoder.dataset.n_shared_rows,) * 2

    def test_without_hypergraph(self, tiny_split, make_config):
        enc = MotifEncoder(tiny_split.train, make_config(model={"use_hypergraph": False}))
        structure = enc.build_structure(0)
        assert structure.shared_op is None
        tables = enc.convolve(structure)
        assert np.array_equal(tables.shared.data, enc.store["emb.shared"].data)

    def test_context_of(self, encoder, tiny_split):
        graph = tiny_split.train.graphs[0]
        overlapped = tiny_split.train.overlap.overlapped_ids(0)
        for idx, node in enumerate(graph.users):
            expected = Context.SHARED if node.global_id in overlapped else Context.SPECIFIC
            assert encoder.context_of(0, idx) is expected


class TestLayerAverage:
    def test_no_operator_is_identity(self):
        X = Tensor(np.arange(6.0).reshape(3, 2))
        assert layer_average(None, X, 3) is X

    def test_identity_operator(self):
        X = Tensor(np.arange(6.0).reshape(3, 2))
        out = layer_average(sp.identity(3, format="csr"), X, 2)
        assert np.allclose(out.data, X.data)

    def test_averages_layers(self):
        op = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        X = Tensor(np.array([[1.0], [3.0]]))
        # (X + op X) / 2
        assert np.allclose(layer_average(op, X, 1).data, [[2.0], [2.0]])


class TestComposition:
    def test_inter_second_half_is_zero(self):
        shared = Tensor(np.ones((2, 4)))
        out = compose_user_embedding(Task.INTER, shared)
        assert out.shape == (2, 8)
        assert np.all(out.data[:, 4:] == 0.0)

    def test_intra_needs_specific(self):
        with pytest.raises(ValidationError):
            compose_user_embedding(Task.INTRA, Tensor(np.ones((1, 4))))

    def test_missing_shared(self):
        with pytest.raises(NodeLookupError):
            compose_user_embedding(Task.INTER, None)


class TestNodeEmbedder:
    def test_domain_arrays_shapes(self, embedder, tiny_split):
        graph = tiny_split.train.graphs[0]
        users, items = embedder.domain_arrays(0, Task.INTRA)
        assert users.shape == (graph.n_users, 32)
        assert items.shape == (graph.n_items, 32)
        assert np.all(np.isfinite(users)) and np.all(np.isfinite(items))

    @pytest.mark.parametrize("source", [None, 1])
    def test_inter_users_have_no_specific_half(self, embedder, source):
        users, _ = embedder.domain_arrays(0, Task.INTER, source)
        assert np.all(users[:, 16:] == 0.0)

    def test_inter_users_borrow_source_motifs(self, embedder, tiny_split):
        target, source = tiny_split.train.graphs[0], tiny_split.train.graphs[1]
        shared = sorted(tiny_split.train.overlap.shared(0, 1))
        gid = shared[0]
        u_target = target.node_by_global(NodeKind.USER, gid).per_domain_id
        u_source = source.node_by_global(NodeKind.USER, gid).per_domain_id
        borrowed = embedder.users(0, Task.INTER, [u_target], source=1).data[0, :16]
        expected = embedder.vectors(1, Context.SHARED, 0, np.array([u_source])).data[0]
        assert np.allclose(borrowed, expected)

    def test_cached_matches_live(self, encoder):
        structure = encoder.build_structure(0)
        cached = NodeEmbedder(encoder, structure, cache=True).domain_arrays(1, Task.INTRA)
        live = NodeEmbedder(encoder, structure, cache=False).domain_arrays(1, Task.INTRA)
        assert np.allclose(cached[0], live[0])
        assert np.allclose(cached[1], live[1])


class TestPretrainingGradient:
    @pytest.mark.parametrize("seed", range(10))
    def test_lookup_mode_readout_losses(self, tiny_split, make_config, seed):
        encoder = MotifEncoder(tiny_split.train, make_config(seed=seed))
        structure = encoder.build_structure(0)
        pool = structure.pools[0]
        nodes = sorted(pool.covered_nodes(2))[:6]
        groups = {}
        for node in nodes:
            groups.setdefault(encoder.context_of(0, node), []).append(node)
        assert sum(len(g) for g in groups.values()) >= 2

        rng = np.random.default_rng(seed)
        masks = {node: mask_motif(pool.motifs_for(node)[0], rng) for node in nodes}
        truth = rng.normal(size=(len(nodes), 16))

        def f():
            tables = encoder.convolve(structure)
            views, reconstructed = [], []
            for context, group in groups.items():
                first = encoder.embed(tables, structure, 0, context, group,
                                      motif_sets=[[pool.motifs_for(n)[0]] for n in group])
                second = encoder.embed(tables, structure, 0, context, group,
                                       motif_sets=[[pool.motifs_for(n)[1]] for n in group])
                views.append(ViewPair(0, context, first, second))
                reconstructed.append(encoder.embed(tables, structure, 0, context, group,
                                                   masks=[masks[n] for n in group]))
            cl, _ = cl_loss(views, 0.5)
            er = er_loss(concat(reconstructed, axis=0), truth, 0.5)
            return pretrain_loss(cl, er, 0.5)

        assert grad_check(f, encoder.store, max_coords=3, seed=seed) < 1e-4
