"""Model stack: config validation, seeded init, forward determinism and
locality, encode-path parity with the repository, position-agnostic cross
attention, gradient checks through the full stack, and checkpoints."""

import math
import random
from types import SimpleNamespace

import numpy as np
import pytest

from journeykit._binio import pack_text
from journeykit.model import (CHECKPOINT_MAGIC, LayerGroupConfig, ModelConfig,
                              ModelError, Parameters, TokenRef,
                              build_repository, config_digest,
                              config_from_corpus,
                              cross_attend_position_agnostic,
                              export_operator_table, forward, init_params,
                              load_checkpoint, save_checkpoint)
from journeykit.numerics import Matrix, Vector, finite_diff_grad
from journeykit.operators import rope_freqs
from journeykit.repository import Repository, RepositoryItem
from journeykit.schema import CorpusBuilder


def batch_of(struct=(), lang=(), adjacency=None):
    return SimpleNamespace(lang_tokens=list(lang), struct_tokens=list(struct),
                           adjacency=adjacency or {})


def triple_tokens(inst, h, r, t):
    return [TokenRef(h, "HEAD", inst), TokenRef(r, "RELATION", inst),
            TokenRef(t, "TAIL", inst)]


def small_config(**overrides):
    kw = dict(vocab_size=10, slot_ids=("HEAD", "RELATION", "TAIL"),
              relation_ids=("knows",), d_model=8, head_count=2,
              layer_groups=(
                  LayerGroupConfig("structured", "instance_local", 1),
                  LayerGroupConfig("structured", "neighborhood", 1,
                                   journey_mode="instance_journey"),
              ),
              ffn_mult=1)
    kw.update(overrides)
    cfg = ModelConfig(**kw)
    cfg.validate()
    return cfg


class TestConfig:
    def test_validate_collects_every_problem(self):
        cfg = ModelConfig(vocab_size=0, d_model=9, head_count=2,
                          layer_groups=(LayerGroupConfig("audio", "wide", 0),),
                          slot_op_kind="unitary", readout="max_pool",
                          slot_ids=("HEAD", "HEAD", "POSITION_3"),
                          relation_ids=("r", "r"))
        with pytest.raises(ModelError) as err:
            cfg.validate()
        text = str(err.value)
        for frag in ("vocab_size", "not divisible", "unknown stream",
                     "unknown level", "layers must be", "slot_op_kind",
                     "unknown readout", "duplicate slot", "positional slots",
                     "duplicate relation ids"):
            assert frag in text

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ModelError, match="head_dim 3 must be even"):
            ModelConfig(vocab_size=4, d_model=6, head_count=2).validate()

    def test_cross_group_needs_slot_journeys(self):
        cfg = ModelConfig(vocab_size=4, layer_groups=(
            LayerGroupConfig("cross", "global", 1,
                             journey_mode="instance_journey"),))
        with pytest.raises(ModelError, match="cross groups support"):
            cfg.validate()

    def test_round_trips_through_dict(self):
        cfg = small_config()
        back = ModelConfig.from_dict(cfg.to_dict())
        assert back == cfg
        assert config_digest(back) == config_digest(cfg)

    def test_digest_tracks_content(self):
        assert config_digest(small_config()) != config_digest(
            small_config(seed=1))

    def test_derived_sizes(self):
        cfg = small_config()
        assert cfg.head_dim == 4
        assert cfg.layer_count == 2


class TestConfigFromCorpus:
    def test_collects_slots_and_relations(self):
        b = CorpusBuilder()
        b.add_triple("ada", "knows", "grace")
        b.add_nary("met", {"A": "ada", "B": "grace"})
        b.add_sentence(["ada", "met", "grace"], ["NOUN", "VERB", "NOUN"])
        cfg = config_from_corpus(b.build(), d_model=8, head_count=2)
        assert cfg.vocab_size == len(b.vocab)
        assert cfg.slot_ids == ("A", "B", "HEAD", "NOUN", "PREDICATE",
                                "RELATION", "TAIL", "VERB")
        assert cfg.relation_ids == ("knows", "met")

    def test_positional_slots_excluded(self):
        b = CorpusBuilder()
        b.add_sentence(["hi"], ["INTJ"])
        cfg = config_from_corpus(b.build(), d_model=4, head_count=1)
        assert all(not s.startswith("POSITION_") for s in cfg.slot_ids)


class TestInitParams:
    def test_deterministic(self):
        p1, p2 = init_params(small_config()), init_params(small_config())
        assert p1.tensors.keys() == p2.tensors.keys()
        for name in p1.tensors:
            assert p1.tensors[name].data.tobytes() == \
                p2.tensors[name].data.tobytes()

    def test_seed_changes_values(self):
        p1 = init_params(small_config())
        p2 = init_params(small_config(seed=3))
        assert p1.tensors["embed"].data != p2.tensors["embed"].data

    def test_structural_inits(self):
        params = init_params(small_config())
        assert set(params.tensors["L0.ln1.g"].data) == {1.0}
        assert set(params.tensors["L0.ln1.b"].data) == {0.0}
        # zero readout head: instance operators start at the identity
        assert set(params.tensors["readout.w2"].data) == {0.0}
        assert set(params.tensors["readout.b2"].data) == {0.0}

    def test_rotation_slots_staggered_on_rope_schedule(self):
        cfg = small_config()
        params = init_params(cfg)
        freqs = rope_freqs(cfg.head_dim)
        for ordinal, slot in enumerate(cfg.slot_ids, start=1):
            row = params.tensors[f"op.slot.{slot}.h0"]
            assert list(row.data) == [ordinal * f for f in freqs]

    def test_projection_scale(self):
        cfg = small_config()
        params = init_params(cfg)
        bound = 1.0 / math.sqrt(cfg.d_model)
        assert all(abs(x) <= bound for x in params.tensors["L0.wq"].data)

    def test_clone_is_independent(self):
        params = init_params(small_config())
        other = params.clone()
        other.tensors["embed"].data[0] += 1.0
        assert params.tensors["embed"].data[0] != other.tensors["embed"].data[0]


class TestForward:
    def test_deterministic_bitwise(self):
        cfg = small_config()
        params = init_params(cfg)
        adjacency = {"i0": frozenset({"i1"}), "i1": frozenset({"i0"})}
        outs = []
        for _ in range(2):
            batch = batch_of(struct=triple_tokens("i0", 1, 2, 3)
                             + triple_tokens("i1", 3, 2, 4),
                             adjacency=adjacency)
            res = forward(batch, params)
            outs.append(res.struct_matrix().data.tobytes())
        assert outs[0] == outs[1]

    def test_instance_local_rows_ignore_other_instances(self):
        """With instance-local masks, editing instance B cannot move any of
        instance A's output rows."""
        cfg = small_config(layer_groups=(
            LayerGroupConfig("structured", "instance_local", 2),))
        params = init_params(cfg)
        adjacency = {"i0": frozenset(), "i1": frozenset()}
        base = forward(batch_of(struct=triple_tokens("i0", 1, 2, 3)
                                + triple_tokens("i1", 4, 2, 5),
                                adjacency=adjacency), params).struct_matrix()
        poked = forward(batch_of(struct=triple_tokens("i0", 1, 2, 3)
                                 + triple_tokens("i1", 6, 7, 8),
                                 adjacency=adjacency), params).struct_matrix()
        for i in range(3):
            assert base.row(i).data == poked.row(i).data
        assert base.row(3).data != poked.row(3).data

    def test_neighborhood_sees_linked_instances(self):
        cfg = small_config(layer_groups=(
            LayerGroupConfig("structured", "neighborhood", 1),))
        params = init_params(cfg)
        struct = triple_tokens("i0", 1, 2, 3) + triple_tokens("i1", 4, 2, 5)
        linked = forward(batch_of(
            struct=struct, adjacency={"i0": frozenset({"i1"}),
                                      "i1": frozenset({"i0"})}),
            params).struct_matrix()
        isolated = forward(batch_of(
            struct=struct, adjacency={"i0": frozenset(),
                                      "i1": frozenset()}),
            params).struct_matrix()
        assert linked.row(0).data != isolated.row(0).data

    def test_language_positions_change_outputs(self):
        cfg = small_config(layer_groups=(
            LayerGroupConfig("language", "instance_local", 1),))
        params = init_params(cfg)

        def lang(positions):
            return [TokenRef(tid, f"POSITION_{p}", "s0")
                    for tid, p in zip((1, 2, 3), positions)]

        a = forward(batch_of(lang=lang((1, 2, 3))), params).lang_matrix()
        b = forward(batch_of(lang=lang((1, 2, 5))), params).lang_matrix()
        assert a.row(0).data != b.row(0).data

    def test_capture_attention(self):
        cfg = small_config()
        params = init_params(cfg)
        batch = batch_of(struct=triple_tokens("i0", 1, 2, 3),
                         adjacency={"i0": frozenset()})
        res = forward(batch, params, capture=True)
        assert set(res.attention) == {(li, h) for li in range(2)
                                      for h in range(2)}
        probs = res.attention[(0, 0)]
        for i in range(probs.rows):
            assert sum(probs.row(i).data) == pytest.approx(1.0, abs=1e-12)

    def test_capture_filter(self):
        cfg = small_config()
        params = init_params(cfg)
        batch = batch_of(struct=triple_tokens("i0", 1, 2, 3),
                         adjacency={"i0": frozenset()})
        res = forward(batch, params, capture={(1, 0)})
        assert set(res.attention) == {(1, 0)}

    def test_token_out_of_vocab_rejected(self):
        params = init_params(small_config())
        with pytest.raises(ModelError, match="outside vocabulary"):
            forward(batch_of(struct=triple_tokens("i0", 1, 2, 99)), params)

    def test_unknown_slot_rejected(self):
        params = init_params(small_config())
        batch = batch_of(struct=[TokenRef(1, "MODIFIER", "i0")],
                         adjacency={"i0": frozenset()})
        with pytest.raises(ModelError, match="no learned operator"):
            forward(batch, params)

    def test_cross_without_sources_rejected(self):
        cfg = small_config(layer_groups=(
            LayerGroupConfig("cross", "global", 1,
                             positional_transport=False),))
        params = init_params(cfg)
        batch = batch_of(lang=[TokenRef(1, "POSITION_1", "s0")])
        with pytest.raises(ModelError, match="cross-attention needs"):
            forward(batch, params)

    def test_unfrozen_repository_rejected(self):
        cfg = small_config(layer_groups=(
            LayerGroupConfig("cross", "global", 1,
                             positional_transport=False),))
        params = init_params(cfg)
        repo = Repository(cfg.d_model)
        repo.add([RepositoryItem(Vector(8), Vector(8), "HEAD", "i0")])
        batch = batch_of(lang=[TokenRef(1, "POSITION_1", "s0")])
        with pytest.raises(ModelError, match="frozen"):
            forward(batch, params, repo=repo)

    def test_repository_dim_checked(self):
        cfg = small_config(layer_groups=(
            LayerGroupConfig("cross", "global", 1,
                             positional_transport=False),))
        params = init_params(cfg)
        repo = Repository(4)
        repo.add([RepositoryItem(Vector(4), Vector(4), "HEAD", "i0")])
        repo.frozen = True
        batch = batch_of(lang=[TokenRef(1, "POSITION_1", "s0")])
        with pytest.raises(ModelError, match="repository dim 4"):
            forward(batch, params, repo=repo)


def corpus_and_params(**overrides):
    b = CorpusBuilder()
    b.add_triple("ada", "knows", "grace", provenance="train")
    b.add_triple("grace", "knows", "lin", provenance="train")
    b.add_sentence(["ada", "knows", "grace"], ["NOUN", "VERB", "NOUN"])
    corpus = b.build()
    cfg = config_from_corpus(corpus, d_model=8, head_count=2, ffn_mult=1,
                             **overrides)
    return corpus, init_params(cfg)


class TestEncodePathParity:
    @pytest.mark.parametrize("kind", ["rotation", "diagonal", "low_rank"])
    def test_forward_keys_match_repository(self, kind):
        """The differentiable encoder and the offline repository builder
        produce byte-identical keys and values for the same instances."""
        corpus, params = corpus_and_params(
            slot_op_kind=kind,
            layer_groups=(LayerGroupConfig("structured", "instance_local", 1),))
        struct = []
        for inst in corpus.instances:
            for tok in inst.tokens:
                struct.append(TokenRef(tok.token_id, tok.slot,
                                       inst.instance_id, tok.within))
        res = forward(batch_of(struct=struct, adjacency=corpus.adjacency),
                      params)
        keys = res.encoded_keys()
        repo = build_repository(corpus.instances, params)
        assert keys.m.rows == len(repo.items)
        for i, item in enumerate(repo.items):
            assert keys.m.row(i).data == item.key.data

    def test_encoded_keys_requires_struct_tokens(self):
        _, params = corpus_and_params(layer_groups=(
            LayerGroupConfig("language", "instance_local", 1),))
        res = forward(batch_of(lang=[TokenRef(1, "POSITION_1", "s0")],
                               struct=[]), params)
        with pytest.raises(ModelError, match="no structured tokens"):
            res.encoded_keys()


class TestExportOperatorTable:
    def test_rotation_slots_concatenate_heads(self):
        _, params = corpus_and_params()
        cfg = params.config
        table = export_operator_table(params)
        for s in cfg.slot_ids:
            angles = []
            for h in range(cfg.head_count):
                angles.extend(params.tensors[f"op.slot.{s}.h{h}"].data)
            got = table.slot_op(s).angles()
            assert list(got) == angles

    def test_relations_exported(self):
        _, params = corpus_and_params()
        table = export_operator_table(params)
        op = table.relation_op("knows")
        assert list(op.angles()) == list(params.tensors["op.rel.knows"].data)

    def test_positional_slots_use_full_width(self):
        _, params = corpus_and_params()
        table = export_operator_table(params)
        assert table.slot_op("POSITION_2").dim == params.config.d_model


class TestBuildRepository:
    def test_one_item_per_token(self):
        corpus, params = corpus_and_params()
        repo = build_repository(corpus.instances, params)
        assert len(repo) == sum(len(i.tokens) for i in corpus.instances)
        assert repo.frozen
        item = repo.items[0]
        assert (item.slot, item.instance, item.provenance) == ("HEAD", "i0",
                                                               "train")

    def test_freeze_flag(self):
        corpus, params = corpus_and_params()
        repo = build_repository(corpus.instances, params, freeze=False)
        assert not repo.frozen


def cross_config_params():
    b = CorpusBuilder()
    b.add_triple("ada", "knows", "grace")
    b.add_triple("grace", "wrote", "code")
    corpus = b.build()
    cfg = config_from_corpus(
        corpus, d_model=8, head_count=2, ffn_mult=1,
        layer_groups=(LayerGroupConfig("cross", "global", 1,
                                       positional_transport=False),))
    params = init_params(cfg)
    return corpus, params, build_repository(corpus.instances, params)


class TestCrossAttendPositionAgnostic:
    def test_equal_states_anywhere_get_equal_outputs(self):
        rng = random.Random(0)
        _, params, repo = cross_config_params()
        v = Vector(8, [rng.uniform(-1, 1) for _ in range(8)])
        w = Vector(8, [rng.uniform(-1, 1) for _ in range(8)])
        hidden = [(v, "HEAD", "x"), (w, "TAIL", "y"), (v, "HEAD", "z")]
        outs = cross_attend_position_agnostic(hidden, repo, params)
        assert outs[0].data == outs[2].data
        assert outs[0].data != outs[1].data

    def test_repository_permutation_invariance(self):
        rng = random.Random(1)
        _, params, repo = cross_config_params()
        v = Vector(8, [rng.uniform(-1, 1) for _ in range(8)])
        base = cross_attend_position_agnostic([(v, "HEAD", "x")], repo,
                                              params)[0]
        shuffled = Repository(repo.dim)
        order = list(range(len(repo.items)))
        rng.shuffle(order)
        shuffled.add(repo.items[i] for i in order)
        shuffled.frozen = True
        perm = cross_attend_position_agnostic([(v, "HEAD", "x")], shuffled,
                                              params)[0]
        np.testing.assert_allclose(list(perm.data), list(base.data),
                                   atol=1e-12)

    def test_return_weights(self):
        rng = random.Random(2)
        _, params, repo = cross_config_params()
        v = Vector(8, [rng.uniform(-1, 1) for _ in range(8)])
        outs, weights = cross_attend_position_agnostic(
            [(v, "HEAD", "x")], repo, params, return_weights=True)
        assert set(weights) == {0, 1}
        for probs in weights.values():
            assert probs.rows == 1 and probs.cols == len(repo.items)
            assert sum(probs.row(0).data) == pytest.approx(1.0, abs=1e-12)

    def test_top_k_narrows_attention(self):
        rng = random.Random(3)
        _, params, repo = cross_config_params()
        v = Vector(8, [rng.uniform(-1, 1) for _ in range(8)])
        _, weights = cross_attend_position_agnostic(
            [(v, "HEAD", "x")], repo, params, top_k=2, return_weights=True)
        nonzero = sum(1 for x in weights[0].row(0).data if x != 0.0)
        assert nonzero <= 2

    def test_requires_cross_group(self):
        params = init_params(small_config())
        repo = Repository(8)
        repo.add([RepositoryItem(Vector(8), Vector(8), "HEAD", "i0")])
        repo.frozen = True
        with pytest.raises(ModelError, match="no cross-attention group"):
            cross_attend_position_agnostic([(Vector(8), "HEAD", "x")], repo,
                                           params)

    def test_requires_frozen_repository(self):
        _, params, repo = cross_config_params()
        loose = Repository(8)
        loose.add(repo.items)
        with pytest.raises(ModelError, match="frozen"):
            cross_attend_position_agnostic([(Vector(8), "HEAD", "x")], loose,
                                           params)

    def test_hidden_dim_checked(self):
        _, params, repo = cross_config_params()
        with pytest.raises(ModelError, match="hidden dim 4"):
            cross_attend_position_agnostic([(Vector(4), "HEAD", "x")], repo,
                                           params)


class TestGradients:
    def test_full_stack_gradcheck(self):
        """Tape gradients through attention, transport, instance readout,
        and slot-pair biases agree with central differences."""
        from journeykit.numerics import autodiff as ad

        cfg = small_config()
        params = init_params(cfg)
        rng = random.Random(5)
        # move the readout head off its zero init so its gradient is generic
        for name in ("readout.w2", "readout.b2"):
            m = params.tensors[name]
            for i in range(len(m.data)):
                m.data[i] = rng.uniform(-0.1, 0.1)
        adjacency = {"i0": frozenset({"i1"}), "i1": frozenset({"i0"})}

        def make_batch():
            return batch_of(struct=triple_tokens("i0", 1, 2, 3)
                            + triple_tokens("i1", 3, 2, 4),
                            adjacency=adjacency)

        weights = None

        def loss_value():
            res = forward(make_batch(), params)
            acc = 0.0
            for i, x in enumerate(res.struct.m.data):
                acc += weights[i] * x
            return acc

        tape = ad.Tape()
        res = forward(make_batch(), params, tape=tape)
        n = len(res.struct.m.data)
        weights = [rng.uniform(0.5, 1.5) for _ in range(n)]
        w = Matrix(res.struct.m.rows, res.struct.m.cols, weights)
        loss = ad.sum_all(tape, ad.hadamard(tape, res.struct,
                                            tape.constant(w)))
        tape.backward(loss)

        for name in ("op.slot.HEAD.h0", "op.slot.TAIL.h1", "readout.w2",
                     "bias.slotpair", "L0.wq", "embed"):
            analytic = res.leaves[name].grad
            assert analytic is not None, name
            numeric = finite_diff_grad(lambda _m: loss_value(),
                                       params.tensors[name])
            for i in range(len(numeric.data)):
                got, ref = analytic.data[i], numeric.data[i]
                scale = max(abs(got), abs(ref), 1e-4)
                assert abs(got - ref) / scale < 1e-5, (
                    f"{name}[{i}]: {got} vs {ref}")


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        _, params = corpus_and_params()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert back.config == params.config
        assert back.tensors.keys() == params.tensors.keys()
        for name in params.tensors:
            assert back.tensors[name].data.tobytes() == \
                params.tensors[name].data.tobytes()

    def test_config_hash_verified_on_request(self, tmp_path):
        _, params = corpus_and_params()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, path)
        load_checkpoint(path, params.config)
        other = small_config(seed=9)
        with pytest.raises(ModelError, match="config hash mismatch"):
            load_checkpoint(path, other)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"XXXXXXXX" + b"\x00" * 16)
        with pytest.raises(ModelError, match="unrecognized checkpoint"):
            load_checkpoint(path)

    def test_corrupt_stored_config_rejected(self, tmp_path):
        _, params = corpus_and_params()
        import json
        cfg_json = json.dumps(params.config.to_dict(), sort_keys=True)
        path = tmp_path / "m.ckpt"
        path.write_bytes(CHECKPOINT_MAGIC + pack_text(cfg_json)
                         + pack_text("0" * 64))
        with pytest.raises(ModelError, match="does not match its stored"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        _, params = corpus_and_params()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-20])
        with pytest.raises(ModelError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        _, params = corpus_and_params()
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, path)
        path.write_bytes(path.read_bytes() + b"!")
        with pytest.raises(ModelError, match="trailing bytes"):
            load_checkpoint(path)

    def test_missing_tensor_rejected(self, tmp_path):
        _, params = corpus_and_params()
        dropped = dict(params.tensors)
        dropped.pop("repo.wk")
        path = tmp_path / "m.ckpt"
        save_checkpoint(Parameters(params.config, dropped), path)
        with pytest.raises(ModelError, match="do not fit the stored config"):
            load_checkpoint(path)

    def test_misshapen_tensor_rejected(self, tmp_path):
        _, params = corpus_and_params()
        bad = dict(params.tensors)
        bad["repo.wk"] = Matrix(2, 2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(Parameters(params.config, bad), path)
        with pytest.raises(ModelError, match="do not fit the stored config"):
            load_checkpoint(path)

    def test_non_finite_tensor_rejected(self, tmp_path):
        _, params = corpus_and_params()
        poisoned = params.clone()
        poisoned.tensors["embed"].data[0] = float("nan")
        path = tmp_path / "m.ckpt"
        save_checkpoint(poisoned, path)
        with pytest.raises(ModelError, match="non-finite"):
            load_checkpoint(path)
