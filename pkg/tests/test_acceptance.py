"""Acceptance suite: one verdict line per criterion, printed in the pytest summary."""
import numpy as np
import pytest

from conftest import record
import sym_oracle as so
from weaksym import forms
from weaksym.analysis import (
    RATE_TOL, beta_decay, certify_levels, level_errors, manufactured_case, orthogonality_residual,
    run_convergence, sigma_norm_matrices,
)
from weaksym.assembly import Material, assemble_saddle
from weaksym.mesh import build_mesh
from weaksym.operators import discrete_identity_residual, mass_matrix
from weaksym.spaces import (CATALOGUE, MESH_FAMILY, SpaceDescriptor, build_space, construction_degree,
                            make_triple)

pytestmark = pytest.mark.slow

RATE_ROWS = [("PEERS", 1), ("AFW", 1), ("AFW", 2), ("GG", 2), ("Stenberg", 2), ("CGG", 2), ("THB", 2),
             ("Rect2D", 2), ("AwanouLow", 1), ("BaryBDM", 2)]
# construction degrees swept by the structural criteria
DEGREES = {"PEERS": [1], "Rect2D": [1], "AwanouLow": [1], "CGG": [2]}


def catalogue_triples(m):
    for name in CATALOGUE:
        for k in DEGREES.get(name, [1, 2]):
            yield make_triple(name, k, build_mesh(MESH_FAMILY[name], m))


@pytest.fixture(scope="module")
def rate_studies():
    case = manufactured_case("default")
    return {row: run_convergence(row[0], row[1], case, levels=4, m0=8) for row in RATE_ROWS}


def test_criterion_1_rates(rate_studies):
    misses = []
    for (name, k), rep in rate_studies.items():
        r = rep.rates()
        for col, t in zip(("err_sigma", "err_pu", "err_gamma"), rep.targets):
            if not abs(r[col] - t) <= RATE_TOL:
                misses.append(f"{name} k={k} {col} {r[col]:.2f} vs {t}")
    record(1, not misses, "all rows within 0.2" if not misses else "; ".join(misses))
    assert not misses


def test_criterion_2_improved_estimate_constant(rate_studies):
    bad = []
    for (name, k), rep in rate_studies.items():
        g = max(rep.constant_growth())
        if g > 0.10:
            bad.append(f"{name} k={k} growth {g:.1%}")
    record(2, not bad, "C growth <= 10% per level" if not bad else "; ".join(bad))
    assert not bad


def test_criterion_3_commuting_identity():
    worst, names = 0.0, []
    for t in catalogue_triples(4):
        if t.xi is None:
            continue
        worst = max(worst, max(discrete_identity_residual(t.xi, t.gamma)))
        names.append(t.name)
    ok = worst <= 1e-12
    record(3, ok, f"worst residual {worst:.1e} over {len(names)} enriched triples at m=4")
    assert ok


def test_criterion_4_stability_certificates():
    bad = []
    for t in catalogue_triples(2):
        name, k = t.name, t.k
        reports, fails = certify_levels(name, k, (2, 4, 8))
        orth = max(orthogonality_residual(make_triple(name, k, build_mesh(MESH_FAMILY[name], m)))
                   for m in (2, 4, 8))
        if orth > 1e-12:
            fails.append(f"orthogonality {orth:.1e}")
        if fails:
            bad.append(f"{name} order {t.table_k}: " + ", ".join(fails))
    reports, _ = certify_levels("UNSTABLE_PROBE", 1, (2, 4, 8))
    decay = beta_decay(reports)
    if not np.all(decay > 0.30):
        bad.append(f"probe decay only {decay.min():.1%}")
    record(4, not bad, f"probe decay {decay.min():.1%}" if not bad else " | ".join(bad))
    assert not bad


def test_criterion_5_conservation(rate_studies):
    div = max(lv.div_residual for rep in rate_studies.values() for lv in rep.levels)
    sym = max(lv.symmetry_residual for rep in rate_studies.values() for lv in rep.levels)
    ok = div <= 1e-10 and sym <= 1e-10
    record(5, ok, f"max ||div sigma_h + P_h f|| {div:.1e}, max weak symmetry {sym:.1e}")
    assert ok


def test_criterion_6_locking():
    lines, ok = [], True
    for name, table_k in (("AFW", 1), ("GG", 2)):
        k = construction_degree(name, table_k)
        totals = []
        for lam in (1.0, 1e6):
            lv = level_errors(make_triple(name, k, build_mesh("tri", 8)), manufactured_case("locking", 1.0, lam))
            totals.append(lv.err_sigma + lv.err_u + lv.err_gamma)
        ratio = totals[1] / totals[0]
        ok &= ratio <= 2.0
        lines.append(f"{name} k={table_k} ratio {ratio:.3f}")
    record(6, ok, ", ".join(lines))
    assert ok


def _production_blocks():
    mesh = so.reference_mesh()
    mat = Material(1.3, 0.7)
    out = {}
    afw = assemble_saddle(make_triple("AFW", 1, mesh), mat)
    out["BDM_1"] = ("matrix", afw.triple.sigma, afw.M.toarray(), "compliance")
    out["P_0^d"] = ("vector", afw.triple.u, mass_matrix(afw.triple.u).toarray(), "mass")
    rtn = build_space(mesh, SpaceDescriptor("RTN", 1, "matrix"))
    quad = forms.cell_quadrature(mesh, 4)
    M, Ddiv, _, _ = sigma_norm_matrices(rtn, quad)
    out["RTN_1"] = ("matrix", rtn, (M + Ddiv).toarray(), "div")
    peers = assemble_saddle(make_triple("PEERS", 1, mesh), mat)
    out["P_1^c(skw)"] = ("skew", peers.triple.gamma, mass_matrix(peers.triple.gamma).toarray(), "mass")
    gg = assemble_saddle(make_triple("GG", 1, mesh), mat)
    out["Bhat_1"] = ("enriched", gg, None, "enrichment")
    return out, mat


def test_criterion_7_oracle_equivalence():
    blocks, mat = _production_blocks()
    d = 4
    errs = {}

    def pad(c):
        return np.concatenate([c, np.zeros(c.shape[:2] + (len(so.exponents(d)) - c.shape[2],))], axis=2)

    for label, (_, space, A, kind) in blocks.items():
        if kind == "enrichment":
            sys_ = space
            t = sys_.triple
            cs, r1 = so.fit_basis(t.sigma, d)
            cg, r2 = so.fit_basis(t.gamma, d)
            enr = np.flatnonzero(t.sigma.dof_kind == "enrichment")
            M = so.gram(so.compliance(cs, mat.mu, mat.lam), cs, d)
            S = so.gram(cg, cs, d)
            e = max(np.abs(sys_.M.toarray()[:, enr] - M[:, enr]).max() / np.abs(M).max(),
                    np.abs(sys_.S.toarray()[:, enr] - S[:, enr]).max() / max(np.abs(S).max(), 1.0))
            errs[label] = max(e, r1, r2)
            continue
        c, res = so.fit_basis(space, d)
        c = pad(c)
        if kind == "compliance":
            O = so.gram(so.compliance(c, mat.mu, mat.lam), c, d)
        elif kind == "div":
            dv = so.row_div(c, d)
            O = so.gram(c, c, d) + so.gram(dv, dv, d)
        else:
            O = so.gram(c, c, d)
        errs[label] = max(np.abs(A - O).max() / np.abs(O).max(), res)
    worst = max(errs.values())
    ok = worst <= 1e-12
    record(7, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok
