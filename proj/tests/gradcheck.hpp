#pragma once

// Central finite-difference oracle for gradient checks. Kept independent of
// the autodiff path on purpose: it only re-evaluates a plain scalar function
// of a flat input vector.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace gradcheck {

using ScalarFn = std::function<double(const std::vector<double>&)>;

inline std::vector<double> central_diff(const ScalarFn& f,
                                        std::vector<double> x,
                                        double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct CheckResult {
  bool ok = true;
  std::size_t worst_index = 0;
  double worst_error = 0.0;
  double analytic = 0.0;
  double numeric = 0.0;

  std::string describe() const {
    std::ostringstream os;
    os << "worst |a-f|=" << worst_error << " at i=" << worst_index
       << " (analytic=" << analytic << ", numeric=" << numeric << ")";
    return os.str();
  }
};

// |a - f| <= atol + rtol * max(|a|, |f|) per element.
inline CheckResult compare(const std::vector<double>& analytic,
                           const std::vector<double>& numeric,
                           double rtol = 1e-5, double atol = 1e-8) {
  CheckResult r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i];
    const double f = numeric[i];
    const double err = std::abs(a - f);
    const double tol = atol + rtol * std::max(std::abs(a), std::abs(f));
    if (err >= r.worst_error) {
      r.worst_error = err;
      r.worst_index = i;
      r.analytic = a;
      r.numeric = f;
    }
    if (err > tol) r.ok = false;
  }
  return r;
}

inline CheckResult check(const ScalarFn& f, const std::vector<double>& x,
                         const std::vector<double>& analytic,
                         double rtol = 1e-5, double atol = 1e-8,
                         double h = 1e-5) {
  return compare(analytic, central_diff(f, x, h), rtol, atol);
}

}  // namespace gradcheck
