"""Generate the bundled H2 one-qubit Pauli coefficient table (FCI/STO-3G).

The two-determinant singlet space {|sg^2>, |su^2>} of minimal-basis H2 is
tapered to one qubit: H_e = a I + b Z + c X with
  a = (H11 + H22)/2,  b = (H11 - H22)/2,  c = H12,
where H11, H22, H12 include the nuclear repulsion on the diagonal.
Every row is checked against the pyscf FCI ground-state energy.
"""
import sys
import numpy as np
from pyscf import gto, ao2mo, fci, scf

BOHR_ANGSTROM = 0.529177210903


def coefficients(r_bohr):
    mol = gto.M(atom=[["H", (0, 0, 0)], ["H", (0, 0, r_bohr)]], basis="sto-3g",
                unit="Bohr", verbose=0)
    s = mol.intor("int1e_ovlp")[0, 1]
    g = np.array([1.0, 1.0]) / np.sqrt(2 * (1 + s))
    u = np.array([1.0, -1.0]) / np.sqrt(2 * (1 - s))
    mo = np.column_stack([g, u])
    h1 = mo.T @ (mol.intor("int1e_kin") + mol.intor("int1e_nuc")) @ mo
    eri = ao2mo.restore(1, ao2mo.kernel(mol, mo), 2)
    enuc = mol.energy_nuc()
    h11 = 2 * h1[0, 0] + eri[0, 0, 0, 0] + enuc
    h22 = 2 * h1[1, 1] + eri[1, 1, 1, 1] + enuc
    h12 = eri[0, 1, 0, 1]
    a, b, c = 0.5 * (h11 + h22), 0.5 * (h11 - h22), h12
    # FCI cross-check
    mf = scf.RHF(mol)
    mf.mo_coeff = mo
    e_fci = fci.FCI(mol, mo).kernel()[0]
    e_gs = a - np.hypot(b, c)
    assert abs(e_fci - e_gs) < 1e-9, (r_bohr, e_fci, e_gs)
    return a, b, c


def main(path):
    r_ang = np.round(np.arange(0.25, 4.2 + 1e-9, 0.025), 6)
    with open(path, "w") as f:
        f.write("# H2 one-qubit Pauli coefficients H_e(R) = a I + b Z + c X, FCI/STO-3G.\n")
        f.write("# Generated with pyscf %s by tools/gen_h2_table.py: minimal-basis sigma_g/sigma_u\n" % __import__("pyscf").__version__)
        f.write("# orbitals, two-determinant singlet space tapered to one qubit; nuclear repulsion in a.\n")
        f.write("# Each row reproduces the pyscf FCI ground-state energy a - sqrt(b^2+c^2) to 1e-9 Eh.\n")
        f.write("R_bohr,a_hartree,b_hartree,c_hartree\n")
        for ra in r_ang:
            r = ra / BOHR_ANGSTROM
            a, b, c = coefficients(r)
            f.write("%r,%r,%r,%r\n" % (float(r), float(a), float(b), float(c)))


if __name__ == "__main__":
    main(sys.argv[1])
