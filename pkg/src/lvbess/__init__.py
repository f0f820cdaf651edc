"""lvbess: sizing, placement, and predictive operation of distributed
battery storage in radial low-voltage grids.

The package is organized bottom-up:

``lp``           LP container, revised-simplex / HiGHS solvers, certificates
``grid``         radial network model and its linear operators
``loadflow``     exact forward-backward-sweep load flow (validation oracle)
``opf``          single-step linearized OPF assembly (costs, polygons)
``storage``      battery fleet dynamics and the convex PWA degradation map
``multiperiod``  multi-step OPF with storage coupling; monolithic sizing
``mpc``          receding-horizon execution, window duals and objectives
``benders``      planning master, cuts, bounds, the full sizing loop
``heuristic``    rule-based baseline controller
``economics``    self-sufficiency, lifetime, NPV / IRR post-processing
``io``           grid/profile/scenario files and synthetic profile generator
``scenarios``    shipped study setups and config-to-system assembly
``cli``          batch driver (plan / simulate / compare / validate)
"""

__version__ = "0.1.0"

from . import lp, grid, loadflow, opf, storage, multiperiod, mpc, benders
from . import heuristic, economics, io, scenarios, cli  # noqa: F401
