from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dit_grow.data import gen_synthetic_dataset, make_dataset
from dit_grow.diffusion import DropoutPolicy, train_loop
from dit_grow.expansion import (
    ExpansionError,
    ExpansionSpec,
    expand_model,
    plan_expansion,
    random_probe,
    remap_optimizer_state,
    verify_identity,
    zero_init_block,
)
from dit_grow.model import Block, ModelConfig, block_param_count, count_parameters, init_model
from dit_grow.rng import Rng
from dit_grow.text import EncoderConfig, Encoders, StubEncoder, inject_llm_branch

FIXTURES = Path(__file__).parent / "fixtures"
TOY = ModelConfig(channels=2, frames=2, height=3, width=3, hidden=8, heads=2, blocks=4, ffn_mult=2,
                  t5_width=8, llm_width=6)


def parse(text):
    return ExpansionSpec.parse(text)


def randomize(module, rng, std=0.2):
    for _, p in module.named_parameters():
        p.data = rng.normal(p.shape, std).astype(p.data.dtype)


class TestPlan:
    @pytest.mark.parametrize("spec,fixture", [
        ("insert:k=1", "plan_insert_k1_n4.txt"),
        ("insert:k=1/2", "plan_insert_k1-2_n4.txt"),
        ("insert:k=2", "plan_insert_k2_n4.txt"),
        ("prefix:P=2", "plan_prefix_p2_n4.txt"),
    ])
    def test_golden_reports(self, spec, fixture):
        assert plan_expansion(4, parse(spec)).report() == (FIXTURES / fixture).read_text()

    def test_k_half_sources(self):
        plan = plan_expansion(4, parse("insert:k=1/2"))
        assert [s.source for s in plan.slots if s.is_new] == [1, 3]

    def test_divisibility_error(self):
        with pytest.raises(ExpansionError, match="N must be divisible by M = 2"):
            plan_expansion(3, parse("insert:k=1/2"))

    def test_suffix_sources_last(self):
        plan = plan_expansion(4, parse("suffix:P=3"))
        assert [(s.source, s.is_new) for s in plan.slots[4:]] == [(3, True)] * 3

    def test_prefix_suffix_mirror(self):
        for n in range(1, 6):
            for p in range(1, 4):
                pre = [s.is_new for s in plan_expansion(n, ExpansionSpec("prefix", count=p)).slots]
                suf = [s.is_new for s in plan_expansion(n, ExpansionSpec("suffix", count=p)).slots]
                assert pre == suf[::-1]

    def test_llm_targets_include_branch(self):
        plan = plan_expansion(2, parse("insert:k=1"), llm_branch=True)
        assert plan.zero_init_targets[1][-2:] == ["cross_llm.out", "gate"]

    @pytest.mark.parametrize("text", ["insert:P=2", "prefix:k=1", "insert:k=0", "prefix:P=0", "middle:P=1",
                                      "insert:k=1/0", "prefix:P=1.5", ""])
    def test_bad_specs(self, text):
        with pytest.raises(ExpansionError):
            parse(text)

    def test_spec_reduces_to_lowest_terms(self):
        assert parse("insert:k=2/4").k == Fraction(1, 2)
        assert str(parse("insert:k=2/4")) == "insert:k=1/2"

    def test_empty_stack_rejected(self):
        with pytest.raises(ExpansionError):
            plan_expansion(0, parse("prefix:P=1"))

    @settings(max_examples=60, deadline=None)
    @given(x=st.integers(1, 4), y=st.integers(1, 4), groups=st.integers(1, 4))
    def test_insert_placement_law(self, x, y, groups):
        k = Fraction(x, y)
        n = groups * k.denominator
        plan = plan_expansion(n, ExpansionSpec("insert", k=k))
        xx, yy = k.numerator, k.denominator
        assert plan.new_blocks == xx * n // yy
        originals = [s.source for s in plan.slots if not s.is_new]
        assert originals == list(range(n))
        # after the j-th group of y originals come x copies of that group's last block
        stride = yy + xx
        for j in range(n // yy):
            group = plan.slots[j * stride:(j + 1) * stride]
            assert [s.is_new for s in group] == [False] * yy + [True] * xx
            assert all(s.source == (j + 1) * yy - 1 for s in group[yy:])


class TestExpand:
    def setup_method(self):
        self.base = init_model(TOY, 0)
        randomize(self.base, Rng(0, 50))

    @pytest.mark.parametrize("spec", ["insert:k=1", "insert:k=1/2", "insert:k=2", "prefix:P=2", "suffix:P=2",
                                      "insert:k=3/4", "insert:k=1/4"])
    def test_identity_exact(self, spec):
        grown = expand_model(self.base, plan_expansion(4, parse(spec)))
        assert verify_identity(self.base, grown, 4, Rng(1)) == 0.0

    def test_identity_bit_patterns(self):
        grown = expand_model(self.base, plan_expansion(4, parse("insert:k=1")))
        z, t, cond = random_probe(TOY, Rng(3), batch=2)
        assert self.base(z, t, cond).data.tobytes() == grown(z, t, cond).data.tobytes()

    def test_identity_with_llm_branch(self):
        base = inject_llm_branch(self.base)
        for b in base.blocks:
            b.gate.data[...] = 0.7
        grown = expand_model(base, plan_expansion(4, parse("insert:k=1/2"), llm_branch=True))
        assert verify_identity(base, grown, 4, Rng(2)) == 0.0
        assert grown.blocks[2].gate.data[0] == 0.0

    def test_twice_k1(self):
        once = expand_model(self.base, plan_expansion(4, parse("insert:k=1")))
        twice = expand_model(once, plan_expansion(8, parse("insert:k=1")))
        assert len(twice.blocks) == 16
        assert verify_identity(self.base, twice, 2, Rng(4)) == 0.0

    def test_originals_untouched(self):
        before = {n: p.data.copy() for n, p in self.base.named_parameters()}
        plan = plan_expansion(4, parse("insert:k=1/2"))
        grown = expand_model(self.base, plan)
        for n, p in self.base.named_parameters():
            assert p.data.tobytes() == before[n].tobytes()
        for slot in plan.slots:
            if not slot.is_new:
                a = dict(grown.blocks[slot.position].named_parameters())
                for n, p in self.base.blocks[slot.source].named_parameters():
                    assert a[n].data.tobytes() == p.data.tobytes()

    def test_new_block_modulation_copied(self):
        grown = expand_model(self.base, plan_expansion(4, parse("prefix:P=1")))
        assert np.array_equal(grown.blocks[0].modulation.weight.data, self.base.blocks[0].modulation.weight.data)

    def test_perturbation_detected(self):
        grown = expand_model(self.base, plan_expansion(4, parse("insert:k=1")))
        grown.blocks[1].ffn.fc2.weight.data[0, 0] += 1e-3
        assert verify_identity(self.base, grown, 2, Rng(5)) > 0.0

    def test_plan_model_mismatch(self):
        with pytest.raises(ExpansionError):
            expand_model(self.base, plan_expansion(2, parse("insert:k=1")))

    def test_all_trainable_by_default(self):
        grown = expand_model(self.base, plan_expansion(4, parse("insert:k=1")))
        assert all(p.requires_grad for p in grown.parameters())
        frozen = expand_model(self.base, plan_expansion(4, parse("insert:k=1")), freeze_original=True)
        assert not frozen.blocks[0].spatial.q.weight.requires_grad
        assert frozen.blocks[1].spatial.q.weight.requires_grad


class TestZeroInit:
    def test_sparsity_audit(self):
        for llm in (False, True):
            cfg = ModelConfig(hidden=8, heads=2, t5_width=8, llm_width=6, llm_branch=llm)
            block = Block(cfg, Rng(1))
            randomize(block, Rng(2))
            zero_init_block(block)
            zeroed = {n for n, p in block.named_parameters() if not p.data.any()}
            expected = {f"{layer}.{w}" for layer in block.last_linears() for w in ("weight", "bias")}
            if llm:
                expected.add("gate")
            assert zeroed == expected
            assert len(expected) == (11 if llm else 8)

    def test_modulation_untouched(self):
        block = Block(TOY, Rng(1))
        before = block.modulation.weight.data.copy()
        zero_init_block(block)
        assert block.modulation.weight.data.tobytes() == before.tobytes()


class TestAccounting:
    def test_toy_golden_block_count(self):
        # d=32, ffn x4, t5 width 32: modulation 32*384+384, three attentions of
        # 4*(32*32+32), ffn 32*128+128 + 128*32+32
        assert block_param_count(ModelConfig()) == 12672 + 3 * 4224 + 8352 == 33696

    def test_k1_doubles_blocks_group(self):
        base = init_model(TOY, 0)
        grown = expand_model(base, plan_expansion(4, parse("insert:k=1")))
        g0, g1 = count_parameters(base, True), count_parameters(grown, True)
        assert g1["blocks"] == 2 * g0["blocks"]
        assert g1["embedders"] == g0["embedders"] and g1["heads"] == g0["heads"]

    def test_count_grows_by_p_blocks(self):
        base = init_model(TOY, 0)
        grown = expand_model(base, plan_expansion(4, parse("suffix:P=3")))
        assert count_parameters(grown) == count_parameters(base) + 3 * block_param_count(TOY)

    def test_empty_config_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(blocks=0)


def tiny_dataset(cfg, n=16):
    enc = Encoders(StubEncoder("t5", EncoderConfig(6, cfg.t5_width)), StubEncoder("llm", EncoderConfig(6, cfg.llm_width)))
    return make_dataset(gen_synthetic_dataset(n, cfg, 0), enc)


class TestOptimizerRemap:
    def test_moments_follow_originals(self):
        model = init_model(TOY, 0)
        result = train_loop(model, tiny_dataset(TOY), 2, 1e-3, DropoutPolicy(), Rng(0), batch_size=2)
        plan = plan_expansion(4, parse("insert:k=1"))
        remapped = remap_optimizer_state(result.optimizer, plan)
        assert np.array_equal(remapped.m["blocks.2.ffn.fc2.weight"], result.optimizer.m["blocks.1.ffn.fc2.weight"])
        assert "blocks.1.ffn.fc2.weight" not in remapped.m
        assert remapped.step["x_embed.weight"] == 2

    def test_training_after_growth_leaves_identity(self):
        model = init_model(TOY, 0)
        grown = expand_model(model, plan_expansion(4, parse("insert:k=1")))
        train_loop(grown, tiny_dataset(TOY), 10, 1e-3, DropoutPolicy(), Rng(1), batch_size=2)
        assert verify_identity(model, grown, 2, Rng(6)) > 0.0
