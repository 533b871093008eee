#pragma once

#include <string>
#include <vector>

#include "gmfc/adjoint.hpp"

namespace gmfc {

/// A ready-to-run problem: model, interaction kernel and tuned solver
/// defaults.  Used by the command line tool and the test suite.
struct builtin {
  model mdl;
  graphon g;
  solver_config solver;
};

/// Registered problems:
///  - "lq-scalar":     scalar LQ crowd-aversion model on the flat kernel
///  - "lq-2block":     same dynamics on an asymmetric two-community kernel
///                     with block-dependent initial laws
///  - "convex-nonlq":  decoupled convex model with a quartic running cost
[[nodiscard]] builtin make_builtin(const std::string& name);
[[nodiscard]] std::vector<std::string> builtin_names();

}  // namespace gmfc
