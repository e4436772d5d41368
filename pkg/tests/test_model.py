import dataclasses

import numpy as np
import pytest
import torch

from netsr import corpus, topology
from netsr.corpus import synthesize_observations
from netsr.model import (
    ModelConfig,
    NonFinite,
    RegressorModel,
    TooLong,
    Vocabulary,
    embed_float754,
    pack_observations,
    pack_targets,
)
from netsr.sampling import ObservationSet, Triplet

from conftest import EASY_GEN, TINY_MODEL


def bits_to_hex(bits) -> str:
    return hex(int("".join(str(int(b)) for b in bits), 2))


class TestFloatEmbedding:
    def test_zero_is_all_zero(self):
        assert embed_float754(0.0).sum() == 0

    def test_one(self):
        assert bits_to_hex(embed_float754(1.0)) == "0x3f800000"

    def test_minus_two(self):
        assert bits_to_hex(embed_float754(-2.0)) == "0xc0000000"

    def test_sign_bit_first(self):
        assert embed_float754(-1.0)[0] == 1.0
        assert embed_float754(1.0)[0] == 0.0

    def test_rejects_non_finite(self):
        with pytest.raises(NonFinite):
            embed_float754(float("nan"))
        with pytest.raises(NonFinite):
            embed_float754(float("inf"))

    def test_width(self):
        assert embed_float754(3.25).shape == (32,)


class TestVocabulary:
    def test_bijective(self):
        v = Vocabulary.build(3)
        assert len(set(v.tokens)) == len(v.tokens)
        ids = v.encode(["add", "x_{j,2}", "c"])
        assert v.decode(ids) == ["add", "x_{j,2}", "c"]

    def test_special_ids(self):
        v = Vocabulary.build(3)
        assert v.pad_id == 0

    def test_xj_ids(self):
        v = Vocabulary.build(2)
        names = [v.tokens[i] for i in v.xj_ids()]
        assert names == ["x_{j,0}", "x_{j,1}"]


def random_sets(n_sets=3, seed=0, n_points=20):
    gcfg = EASY_GEN
    sets = []
    for i in range(n_sets):
        pair = corpus.generate_pair(gcfg, np.random.default_rng(seed + i))
        adj = topology.generate_topology(
            topology.TopologySpec("random", 25, {"p": 0.2}),
            np.random.default_rng(seed + 50 + i),
        )
        sets.append(
            synthesize_observations(
                pair, adj, 2, np.random.default_rng(seed + 100 + i), n_points
            )
        )
    return sets


@pytest.fixture(scope="module")
def net():
    model = RegressorModel(TINY_MODEL)
    model.reset_parameters(0)
    model.eval()
    return model


class TestEncoder:
    def test_triplet_permutation_invariance(self, net):
        sets = random_sets(1, seed=1)
        obs = sets[0]
        perm = np.random.default_rng(0).permutation(len(obs))
        shuffled = ObservationSet(
            tuple(obs.triplets[i] for i in perm), obs.dim, obs.scaler
        )
        h1 = net.encode_sets([obs])
        h2 = net.encode_sets([shuffled])
        rel = float((h1 - h2).norm() / h1.norm())
        assert rel <= 1e-5

    def test_neighbor_permutation_invariance(self, net):
        obs = random_sets(1, seed=2)[0]
        r = np.random.default_rng(1)
        trips = []
        for t in obs.triplets:
            if len(t.neighbors) > 1:
                p = r.permutation(len(t.neighbors))
                t = dataclasses.replace(
                    t, neighbors=t.neighbors[p], weights=t.weights[p]
                )
            trips.append(t)
        h1 = net.encode_sets([obs])
        h2 = net.encode_sets([ObservationSet(tuple(trips), obs.dim, obs.scaler)])
        rel = float((h1 - h2).norm() / h1.norm())
        assert rel <= 1e-5

    def test_duplication_is_effectively_invisible(self, net):
        # attention renormalizes over duplicated keys, so repeating every
        # triplet leaves the pooled representation unchanged up to float noise
        obs = random_sets(1, seed=3)[0]
        doubled = ObservationSet(obs.triplets + obs.triplets, obs.dim, obs.scaler)
        h1 = net.encode_sets([obs])
        h2 = net.encode_sets([doubled])
        rel = float((h1 - h2).norm() / h1.norm())
        assert rel <= 1e-8

    def test_padding_invariance_across_batching(self, net):
        # encoding a set alone equals encoding it next to a bigger set
        sets = random_sets(2, seed=4, n_points=12)
        big = random_sets(1, seed=9, n_points=30)[0]
        alone = net.encode_sets([sets[0]])
        together = net.encode_sets([sets[0], big])[0:1]
        assert float((alone - together).abs().max()) < 1e-9


class TestDecoder:
    def test_distribution_sums_to_one(self, net):
        obs = random_sets(1, seed=5)[0]
        h = net.encode_sets([obs])[0]
        probs = net.decode_logits("self", h, ["mul", "c"])
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_self_branch_masks_xj_to_zero(self, net):
        obs = random_sets(1, seed=6)[0]
        h = net.encode_sets([obs])[0]
        probs = net.decode_logits("self", h, [])
        for i in net.vocab.xj_ids():
            assert probs[i] == 0.0
        probs_inter = net.decode_logits("inter", h, [])
        assert probs_inter[net.vocab.xj_ids()[0]] > 0.0

    def test_causality(self, net):
        obs = random_sets(1, seed=7)[0]
        h = net.encode_sets([obs])
        v = net.vocab
        ids_a = torch.tensor([[v.bos_id] + v.encode(["add", "c", "x_{i,0}"])])
        ids_b = ids_a.clone()
        ids_b[0, -1] = v.index["x_{i,1}"]  # change only the last position
        with torch.no_grad():
            la = net.branch_logits("inter", h, ids_a)
            lb = net.branch_logits("inter", h, ids_b)
        assert torch.allclose(la[0, :-1], lb[0, :-1])
        assert not torch.allclose(la[0, -1], lb[0, -1])

    def test_too_long_raises(self, net):
        obs = random_sets(1, seed=8)[0]
        h = net.encode_sets([obs])[0]
        with pytest.raises(TooLong):
            net.decode_logits("self", h, ["c"] * TINY_MODEL.max_seq)


class TestLoss:
    def test_uniform_logits_give_log_vocab(self, net, tiny_corpus):
        model = RegressorModel(TINY_MODEL)
        model.reset_parameters(1)
        with torch.no_grad():
            for dec in (model.dec_self, model.dec_inter):
                dec.head.weight.zero_()
                dec.head.bias.zero_()
        sets = random_sets(2, seed=10)
        batch = pack_observations(sets, TINY_MODEL)
        targets = pack_targets(tiny_corpus.pairs[:2], model.vocab, TINY_MODEL.max_seq)
        loss, _stats = model.loss(batch, targets)
        # the self branch renormalizes over the vocabulary minus masked x_j
        v = len(model.vocab)
        n_xj = len(model.vocab.xj_ids())
        per_branch = {
            "self": np.log(v - n_xj),
            "inter": np.log(v),
        }
        assert float(loss) == pytest.approx(
            np.mean([per_branch["self"], per_branch["inter"]]), rel=0.2
        )

    def test_pad_only_targets_give_zero_loss_and_grads(self, net):
        model = RegressorModel(TINY_MODEL)
        model.reset_parameters(2)
        sets = random_sets(1, seed=11)
        batch = pack_observations(sets, TINY_MODEL)
        pad = model.vocab.pad_id
        bos = model.vocab.bos_id
        ids = torch.full((1, 3), pad, dtype=torch.long)
        ids[0, 0] = bos
        from netsr.model import TargetBatch

        targets = TargetBatch(ids, torch.full((1, 3), pad, dtype=torch.long), ids.clone(), torch.full((1, 3), pad, dtype=torch.long))
        loss, stats = model.loss(batch, targets)
        assert float(loss) == 0.0 and stats.n_tokens == 0
        loss.backward()
        for p in model.parameters():
            if p.grad is not None:
                assert float(p.grad.abs().max()) == 0.0

    def test_empty_self_contributes_only_eos(self, net):
        pair = corpus.EquationPair.from_prefix("", "mul c x_{j,0}", (), (1.0,), 1)
        targets = pack_targets([pair], net.vocab, 16)
        assert targets.self_in.shape[1] == 1
        assert targets.self_out[0, 0] == net.vocab.eos_id

    def test_extreme_targets_give_finite_grads(self):
        model = RegressorModel(TINY_MODEL)
        model.reset_parameters(3)
        trips = []
        r = np.random.default_rng(0)
        for i in range(10):
            y = 1e10 if i % 2 else 1e-10
            trips.append(
                Triplet(0, r.standard_normal(1), np.zeros((0, 1)), np.zeros(0), np.array([y]))
            )
        obs = ObservationSet(tuple(trips), 1)
        batch = pack_observations([obs], TINY_MODEL)
        pair = corpus.EquationPair.from_prefix("c", "mul c x_{j,0}", (1.0,), (1.0,), 1)
        targets = pack_targets([pair], model.vocab, 16)
        loss, _ = model.loss(batch, targets)
        loss.backward()
        for p in model.parameters():
            if p.grad is not None:
                assert torch.isfinite(p.grad).all()

    def test_target_too_long(self, net):
        pair = corpus.EquationPair.from_prefix(
            "", " ".join(["add"] * 40 + ["x_{j,0}"] * 41), (), (), 1
        )
        with pytest.raises(TooLong):
            pack_targets([pair], net.vocab, 16)


class TestGradientCheck:
    def test_matches_central_differences(self, tiny_corpus):
        cfg = ModelConfig(
            d_e=16, n_heads=2, n_isab=1, n_inducing=3, n_seeds=2,
            n_sab=1, n_dec_layers=1, max_seq=24, k_max=4,
        )
        model = RegressorModel(cfg)
        model.reset_parameters(4)
        sets = random_sets(2, seed=12, n_points=8)
        batch = pack_observations(sets, cfg)
        targets = pack_targets(tiny_corpus.pairs[:2], model.vocab, cfg.max_seq)
        loss, _ = model.loss(batch, targets)
        model.zero_grad()
        loss.backward()
        params = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
        r = np.random.default_rng(5)
        checked = 0
        for _ in range(12):
            name, p = params[int(r.integers(len(params)))]
            idx = int(r.integers(p.numel()))
            flat = p.detach().view(-1)
            g_auto = float(p.grad.view(-1)[idx])
            orig = float(flat[idx])
            best = np.inf
            # refine the step when a rectifier kink sits inside the window
            for h in (1e-3, 1e-4, 1e-5):
                with torch.no_grad():
                    flat[idx] = orig + h
                    lp, _ = model.loss(batch, targets)
                    flat[idx] = orig - h
                    lm, _ = model.loss(batch, targets)
                    flat[idx] = orig
                g_num = (float(lp) - float(lm)) / (2 * h)
                denom = max(abs(g_auto), abs(g_num), 1e-8)
                best = min(best, abs(g_auto - g_num) / denom)
                if best <= 1e-4:
                    break
            assert best <= 1e-4, f"{name}[{idx}]"
            checked += 1
        assert checked == 12
