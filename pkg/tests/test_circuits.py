import math

import numpy as np
import pytest
import scipy.linalg

from qsim import svcore as sv
from qsim.circuits import (
    LatticeSpec,
    QpeSpec,
    TfimSpec,
    build_inverse_qft,
    build_qft,
    build_qpe,
    build_random_circuit,
    build_tfim,
    generate_lattice,
    tfim_from_lattice,
)
from qsim.svcore import Circuit, StateSlice, dense_run, probabilities


def circuit_unitary(n, ops):
    dim = 1 << n
    cols = []
    for col in range(dim):
        state = sv.basis_state(n, col)
        for op in ops:
            sv.apply_gate_dense(state, op)
        cols.append(state.amps)
    return np.stack(cols, axis=1)


def random_state(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=1 << n) + 1j * rng.normal(size=1 << n)
    return v / np.linalg.norm(v)


class TestQft:
    def test_single_qubit_is_h(self):
        ops = build_inverse_qft([0])
        assert len(ops) == 1 and ops[0].kind == "H"

    def test_matches_dft_matrix(self):
        # independent analytic oracle: F[y, x] = exp(2*pi*i*x*y/N)/sqrt(N)
        for m in (1, 2, 3, 4):
            N = 1 << m
            dft = np.array(
                [[np.exp(2j * np.pi * xx * yy / N) for xx in range(N)] for yy in range(N)]
            ) / math.sqrt(N)
            got = circuit_unitary(m, build_qft(range(m)))
            assert np.max(np.abs(got - dft)) <= 1e-12

    def test_inverse_property_on_random_states(self):
        for k in range(1, 9):
            ops = build_qft(range(k)) + build_inverse_qft(range(k))
            v = random_state(k, seed=k)
            state = StateSlice(v.copy())
            for op in ops:
                sv.apply_gate_dense(state, op)
            assert np.max(np.abs(state.amps - v)) <= 1e-12

    def test_two_qubit_gate_census(self):
        ops = build_inverse_qft([0, 1])
        kinds = sorted(op.kind for op in ops)
        assert kinds == ["CP", "H", "H", "SWAP"]
        cp_ops = [op for op in ops if op.kind == "CP"]
        assert cp_ops[0].params[0] == pytest.approx(-math.pi / 2)

    def test_gate_counts_by_construction(self):
        for k in (3, 5, 8):
            ops = build_inverse_qft(range(k))
            by_kind = {}
            for op in ops:
                by_kind[op.kind] = by_kind.get(op.kind, 0) + 1
            assert by_kind.get("H", 0) == k
            assert by_kind.get("CP", 0) == k * (k - 1) // 2
            assert by_kind.get("SWAP", 0) == k // 2


class TestQpe:
    def test_k1_zero_numerator(self):
        c = build_qpe(QpeSpec(1, 0))
        probs = probabilities(dense_run(c), c.measured)
        assert probs["0"] == pytest.approx(1.0, abs=1e-12)

    def test_k3_numerator3_deterministic(self):
        c = build_qpe(QpeSpec(3, 3))
        probs = probabilities(dense_run(c), c.measured)
        assert probs["011"] == pytest.approx(1.0, abs=1e-12)

    def test_gate_count_formula(self):
        for k in (1, 2, 4, 7):
            c = build_qpe(QpeSpec(k, 1))
            expected = 1 + k + k + (k + k * (k - 1) // 2 + k // 2)
            assert len(c.ops) == expected

    def test_all_numerators_are_deltas(self):
        # spec property, reduced here; the full k <= 8 sweep runs in acceptance
        for k in (1, 2, 3, 4, 5):
            for numerator in range(1 << k):
                c = build_qpe(QpeSpec(k, numerator))
                probs = probabilities(dense_run(c), c.measured)
                key = format(numerator, f"0{k}b")
                assert probs[key] >= 1.0 - 1e-9, (k, numerator)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            QpeSpec(3, 8)
        with pytest.raises(ValueError):
            QpeSpec(0, 0)


class TestLattice:
    def test_1x2_open_square(self):
        assert generate_lattice(LatticeSpec(1, 2, "square", False)) == [(0, 1)]

    def test_2x2_periodic_square_collapses_wraps(self):
        edges = generate_lattice(LatticeSpec(2, 2, "square", True))
        assert sorted(edges) == [(0, 1), (0, 2), (1, 3), (2, 3)]

    def test_3x4_triangular_periodic_degree6(self):
        edges = generate_lattice(LatticeSpec(3, 4, "triangular", True))
        assert len(edges) == 3 * 12
        degree = {}
        for i, j in edges:
            degree[i] = degree.get(i, 0) + 1
            degree[j] = degree.get(j, 0) + 1
        assert all(d == 6 for d in degree.values())

    def test_deterministic(self):
        spec = LatticeSpec(3, 5, "triangular", True)
        assert generate_lattice(spec) == generate_lattice(spec)

    def test_no_self_loops_or_duplicates(self):
        for rows, cols, kind, periodic in [
            (1, 1, "square", True),
            (2, 3, "triangular", True),
            (1, 4, "square", True),
        ]:
            edges = generate_lattice(LatticeSpec(rows, cols, kind, periodic))
            assert all(a != b for a, b in edges)
            assert len(set(edges)) == len(edges)


def tfim_hamiltonian(spec: TfimSpec) -> np.ndarray:
    """Independent dense H = -J sum ZZ - h sum X built by Kronecker products."""
    n = spec.sites
    I2 = np.eye(2)
    X = np.array([[0, 1], [1, 0]], dtype=complex)
    Z = np.diag([1, -1]).astype(complex)

    def embed(op1q, q):
        # qubit 0 = least significant bit -> rightmost kron factor
        out = np.array([[1.0]], dtype=complex)
        for pos in reversed(range(n)):
            out = np.kron(out, op1q if pos == q else I2)
        return out

    H = np.zeros((1 << n, 1 << n), dtype=complex)
    for i, j in spec.edges:
        H -= spec.J * (embed(Z, i) @ embed(Z, j))
    for q in range(n):
        H -= spec.h * embed(X, q)
    return H


def exact_evolved(spec: TfimSpec) -> np.ndarray:
    n = spec.sites
    plus = np.full(1 << n, (1 << n) ** -0.5, dtype=complex)
    U = scipy.linalg.expm(-1j * tfim_hamiltonian(spec) * spec.t_total)
    return U @ plus


class TestTfim:
    def test_single_site_exact(self):
        # one commuting term: Trotter is exact for any step count
        spec = TfimSpec(1, (), J=0.7, h=1.0, t_total=math.pi / 2, steps=3)
        got = dense_run(build_tfim(spec)).amps
        expect = exact_evolved(spec)
        assert np.max(np.abs(got - expect)) <= 1e-10
        # <Z> of the evolved |+> state stays 0 under pure X rotation
        z_expect = np.sum(np.abs(got) ** 2 * np.array([1.0, -1.0]))
        assert z_expect == pytest.approx(0.0, abs=1e-10)

    def test_h_zero_diagonal_uniform(self):
        lattice = LatticeSpec(2, 2, "square", True)
        spec = tfim_from_lattice(lattice, J=1.3, h=0.0, t_total=1.0, steps=4)
        state = dense_run(build_tfim(spec))
        probs = probabilities(state)
        assert all(v == pytest.approx(1 / 16, abs=1e-12) for v in probs.values())
        assert np.max(np.abs(state.amps - exact_evolved(spec))) <= 1e-10

    def test_j_zero_exact(self):
        lattice = LatticeSpec(1, 3, "square", True)
        spec = tfim_from_lattice(lattice, J=0.0, h=0.9, t_total=0.8, steps=5)
        got = dense_run(build_tfim(spec)).amps
        assert np.max(np.abs(got - exact_evolved(spec))) <= 1e-10

    def test_trotter_convergence_monotone(self):
        lattice = LatticeSpec(2, 2, "square", True)

        def distribution(steps):
            spec = tfim_from_lattice(lattice, J=1.0, h=1.0, t_total=1.0, steps=steps)
            return probabilities(dense_run(build_tfim(spec)))

        ref = distribution(1000)

        def tv(p, q):
            keys = set(p) | set(q)
            return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)

        dists = [tv(distribution(s), ref) for s in (10, 100)]
        assert dists[1] <= dists[0]

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="self-loop"):
            TfimSpec(2, ((0, 0),))
        with pytest.raises(ValueError, match="duplicate"):
            TfimSpec(3, ((0, 1), (1, 0)))
        with pytest.raises(ValueError, match="steps"):
            TfimSpec(2, ((0, 1),), steps=0)


class TestRandomCircuit:
    def test_seed_determinism(self):
        a = build_random_circuit(6, 120, seed=42)
        b = build_random_circuit(6, 120, seed=42)
        assert a.ops == b.ops

    def test_zero_gates(self):
        assert build_random_circuit(3, 0, seed=1).ops == []

    def test_distinct_seeds_differ(self):
        a = build_random_circuit(6, 120, seed=1)
        b = build_random_circuit(6, 120, seed=2)
        assert a.ops != b.ops

    def test_needs_two_qubits(self):
        with pytest.raises(ValueError):
            build_random_circuit(1, 5, seed=0)
