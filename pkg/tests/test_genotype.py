import re

import numpy as np
import pytest

from dyncell import genotype as gt
from dyncell.genotype import (Genotype, GenotypeError, Step, build_graph,
                              cell_param_count, decode, emit_dot, encode,
                              random_genotype, space_size)


class TestDecode:
    def test_minimal_genotype(self):
        g = decode([0, 0, 4, 4, 0], 1)
        assert g.steps == (Step(0, 0, 4, 4, 0),)

    def test_pool_growth_admits_first_aggregate(self):
        g = decode([0, 1, 0, 0, 0, 5, 2, 4, 4, 1], 2)
        assert g.steps[1].in1 == 5

    def test_pool_bound_violation_names_step_and_field(self):
        with pytest.raises(GenotypeError, match=r"step 0 in2 token 5"):
            decode([0, 5, 0, 0, 0], 1)
        with pytest.raises(GenotypeError, match=r"step 1 op1 token 6"):
            decode([0, 0, 0, 0, 0, 0, 0, 6, 0, 0], 2)

    def test_wrong_length_rejected(self):
        with pytest.raises(GenotypeError, match="length"):
            decode([0, 0, 0, 0], 1)

    def test_roundtrip_random(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            depth = int(rng.integers(1, 6))
            g = random_genotype(depth, rng)
            tokens = encode(g)
            assert decode(tokens, depth) == g
            assert encode(decode(tokens, depth)) == tokens

    def test_token_text_roundtrip(self):
        tokens = [0, 3, 2, 5, 1]
        text = gt.format_tokens(tokens)
        assert gt.parse_token_text(text) == tokens
        with pytest.raises(GenotypeError):
            gt.parse_token_text("1,2,x")


class TestBuildGraph:
    def test_single_step_output(self):
        g = decode([0, 0, 4, 4, 0], 1)
        assert build_graph(g).output_set == (5,)

    def test_consumed_aggregate_excluded(self):
        g = decode([0, 1, 0, 0, 0, 5, 5, 4, 4, 1], 2)
        assert build_graph(g).output_set == (6,)

    def test_output_set_matches_scan_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            depth = int(rng.integers(1, 5))
            g = random_genotype(depth, rng)
            got = build_graph(g).output_set
            expect = []
            for i in range(depth):
                node = 5 + i
                used = any(s.in1 == node or s.in2 == node
                           for s in g.steps[i + 1:])
                if not used:
                    expect.append(node)
            assert got == tuple(expect)

    def test_acyclic_and_nonempty_output(self):
        rng = np.random.default_rng(8)
        for _ in range(2000):
            depth = int(rng.integers(1, 7))
            graph = build_graph(random_genotype(depth, rng))
            assert graph.output_set
            for src, step, _, _ in graph.edges:
                assert src < 5 + step  # every edge points forward


class TestSpaceSize:
    def test_depth_one_exhaustive(self):
        count = 0
        for in1 in range(5):
            for in2 in range(5):
                for op1 in range(6):
                    for op2 in range(6):
                        for agg in range(6):
                            decode([in1, in2, op1, op2, agg], 1)
                            count += 1
        assert space_size(1) == count == 5400

    def test_depth_two_formula(self):
        assert space_size(2) == 5400 * 36 * 216 == 41_990_400

    def test_depth_zero_rejected(self):
        with pytest.raises(GenotypeError):
            space_size(0)


class TestParamCount:
    def test_all_skip_weighted_sum(self):
        g = decode([0, 0, 4, 4, 0], 1)
        c, dec = 8, 16
        chans = [16, 32, 16, 24, 32]
        expect = sum(ci * c + c for ci in chans) + 2 * c + c * dec + dec
        assert cell_param_count(g, c, dec, chans) == expect

    def test_conv_width_scaling(self):
        # conv-only genotype: quadratic+linear terms follow the formulas
        g = decode([0, 1, 0, 0, 1, 2, 3, 2, 3, 4], 2)
        chans = [16, 32, 16, 24, 32]
        for c in (8, 16):
            total = cell_param_count(g, c, 16, chans)
            per_block = (
                sum(ci * c + c for ci in chans)
                + 2 * (9 * c + c * c + c)          # two sep-3x3 ops
                + (2 * c * c + c)                  # concat-conv agg
                + (9 * c + c * c + c)              # dilated sep-3x3
                + (25 * c + c * c + c)             # sep-5x5
                + (18 * c * c + c)                 # stacked 3d conv agg
                + 2 * c * 16 + 16)                 # both aggregates unconsumed
            assert total == per_block

    def test_wrong_slot_count_rejected(self):
        g = decode([0, 0, 4, 4, 0], 1)
        with pytest.raises(GenotypeError):
            cell_param_count(g, 8, 16, [1, 2, 3])


DOT_EDGE = re.compile(r"^\s*(\w+) -> (\w+);$")
DOT_NODE = re.compile(r'^\s*(\w+) \[label="[^"]*"[^\]]*\];$')


def check_dot_grammar(text: str):
    """Minimal DOT checker for the emitted subset; returns (nodes, edges)."""
    lines = text.strip().split("\n")
    assert lines[0] == "digraph cell {"
    assert lines[-1] == "}"
    nodes, edges = set(), []
    for line in lines[1:-1]:
        if line.strip().startswith("rankdir"):
            continue
        m = DOT_EDGE.match(line)
        if m:
            edges.append((m.group(1), m.group(2)))
            continue
        m = DOT_NODE.match(line)
        assert m, f"unparseable DOT line: {line!r}"
        nodes.add(m.group(1))
    for a, b in edges:
        assert a in nodes and b in nodes
    return nodes, edges


class TestEmitDot:
    def test_minimal_structure_counts(self):
        dot = emit_dot(decode([0, 0, 4, 4, 0], 1))
        nodes, edges = check_dot_grammar(dot)
        assert len([n for n in nodes if n.startswith("in")]) == 5
        assert len([n for n in nodes if n.startswith("op")]) == 2
        assert len([n for n in nodes if n.startswith("agg")]) == 1
        assert "output" in nodes

    def test_edges_match_graph(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            depth = int(rng.integers(1, 5))
            g = random_genotype(depth, rng)
            graph = build_graph(g)
            nodes, edges = check_dot_grammar(emit_dot(g))

            def node_name(n):
                return f"in{n}" if n < 5 else f"agg{n - 5}"

            expect = set()
            for src, step, slot, _ in graph.edges:
                expect.add((node_name(src), f"op{step}_{slot}"))
                expect.add((f"op{step}_{slot}", f"agg{step}"))
            for node in graph.output_set:
                expect.add((node_name(node), "output"))
            assert set(edges) == expect
