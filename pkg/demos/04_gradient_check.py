"""Run the full gradient-check suite.

Every analytic gradient in the package - embedding Jacobians, the
convolution layer, the loss, and whole networks - is compared against
central finite differences. Non-differentiable loci (triangular kinks,
relu hyperplanes) are excluded with a documented margin; the box
embedding's offset gradient is asserted to be exactly zero.
"""

from pne.gradcheck import format_report, gradient_check_report

rows = gradient_check_report(n_probes=200)  # use 1000+ for the full gate
print(format_report(rows))
