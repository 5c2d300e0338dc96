#include "fstm/dfnc.hpp"

#include <algorithm>
#include <cmath>

#include "fstm/error.hpp"
#include "fstm/params.hpp"

namespace fstm::dfnc {

std::size_t window_count(std::size_t t_total, std::size_t window, std::size_t stride) {
  require(window >= 3, ErrorKind::invalid_argument,
          "dfnc: window must be >= 3, got " + std::to_string(window));
  require(stride >= 1, ErrorKind::invalid_argument, "dfnc: stride must be >= 1");
  require(window <= t_total, ErrorKind::invalid_argument,
          "dfnc: window " + std::to_string(window) + " exceeds series length " +
              std::to_string(t_total));
  return (t_total - window) / stride + 1;
}

Tensor sliding_window_dfnc(const ComponentTimeSeries& ts, std::size_t window,
                           std::size_t stride) {
  const Tensor& x = ts.data;
  require(x.rank() == 3, ErrorKind::shape,
          "dfnc: time series must be [S, T_total, N], got " + shape_str(x.shape()));
  const std::size_t s = x.dim(0), total = x.dim(1), n = x.dim(2);
  const std::size_t nw = window_count(total, window, stride);
  Tensor out({s, n, n, nw});
  std::vector<double> centered(window * n), norms(n);
  for (std::size_t subj = 0; subj < s; ++subj) {
    const double* xs = x.ptr() + subj * total * n;
    for (std::size_t w = 0; w < nw; ++w) {
      const std::size_t t0 = w * stride;
      for (std::size_t c = 0; c < n; ++c) {
        double mean = 0.0;
        for (std::size_t t = 0; t < window; ++t) mean += xs[(t0 + t) * n + c];
        mean /= static_cast<double>(window);
        double ss = 0.0;
        for (std::size_t t = 0; t < window; ++t) {
          const double v = xs[(t0 + t) * n + c] - mean;
          centered[c * window + t] = v;
          ss += v * v;
        }
        norms[c] = std::sqrt(ss);
      }
      for (std::size_t i = 0; i < n; ++i) {
        out[((subj * n + i) * n + i) * nw + w] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
          double r = 0.0;
          const double den = norms[i] * norms[j];
          if (norms[i] > kCorrEps && norms[j] > kCorrEps) {
            double dot = 0.0;
            for (std::size_t t = 0; t < window; ++t)
              dot += centered[i * window + t] * centered[j * window + t];
            r = std::clamp(dot / den, -1.0, 1.0);
          }
          out[((subj * n + i) * n + j) * nw + w] = r;
          out[((subj * n + j) * n + i) * nw + w] = r;
        }
      }
    }
  }
  return out;
}

void SyntheticCohortSpec::validate() const {
  require(n_subjects >= 1, ErrorKind::config, "cohort: n_subjects must be >= 1");
  require(n_networks >= 1 && n_components >= n_networks, ErrorKind::config,
          "cohort: need at least one component per network");
  require(class_count >= 1, ErrorKind::config, "cohort: class_count must be >= 1");
  require(window >= 3 && window <= t_total, ErrorKind::config,
          "cohort: window must satisfy 3 <= window <= t_total");
  require(ar_coefficient >= 0.0 && ar_coefficient < 1.0, ErrorKind::config,
          "cohort: ar_coefficient must lie in [0, 1)");
  require(noise_std >= 0.0 && std::isfinite(noise_std), ErrorKind::config,
          "cohort: noise_std must be finite and >= 0");
  for (const auto& e : effects) {
    require(e.class_id >= 0 && static_cast<std::size_t>(e.class_id) < class_count,
            ErrorKind::config, "cohort: effect class out of range");
    require(e.network_a < n_networks && e.network_b < n_networks &&
                e.network_a != e.network_b,
            ErrorKind::config, "cohort: effect must name two distinct networks");
    require(std::isfinite(e.offset) && std::abs(e.offset) < 1.0, ErrorKind::config,
            "cohort: infeasible correlation offset " + std::to_string(e.offset) +
                " (target correlation must lie in (-1, 1))");
  }
}

nlohmann::json SyntheticCohortSpec::to_json() const {
  nlohmann::json j;
  j["n_subjects"] = n_subjects;
  j["n_components"] = n_components;
  j["n_networks"] = n_networks;
  j["t_total"] = t_total;
  j["window"] = window;
  j["class_count"] = class_count;
  j["effects"] = nlohmann::json::array();
  for (const auto& e : effects)
    j["effects"].push_back({{"class", e.class_id},
                            {"networks", {e.network_a, e.network_b}},
                            {"offset", e.offset}});
  j["ar_coefficient"] = ar_coefficient;
  j["noise_std"] = noise_std;
  j["tr_seconds"] = tr_seconds;
  j["seed"] = seed;
  return j;
}

SyntheticCohortSpec SyntheticCohortSpec::from_json(const nlohmann::json& j) {
  SyntheticCohortSpec s;
  try {
    s.n_subjects = j.value("n_subjects", s.n_subjects);
    s.n_components = j.value("n_components", s.n_components);
    s.n_networks = j.value("n_networks", s.n_networks);
    s.t_total = j.value("t_total", s.t_total);
    s.window = j.value("window", s.window);
    s.class_count = j.value("class_count", s.class_count);
    if (j.contains("effects")) {
      s.effects.clear();
      for (const auto& je : j["effects"]) {
        CouplingEffect e;
        e.class_id = je.value("class", 1);
        const auto nets = je.at("networks").get<std::vector<std::size_t>>();
        require(nets.size() == 2, ErrorKind::config,
                "cohort: effect 'networks' must list two networks");
        e.network_a = nets[0];
        e.network_b = nets[1];
        e.offset = je.at("offset").get<double>();
        s.effects.push_back(e);
      }
    }
    s.ar_coefficient = j.value("ar_coefficient", s.ar_coefficient);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.tr_seconds = j.value("tr_seconds", s.tr_seconds);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("cohort spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

// Lower Cholesky factor; config error when not positive definite.
std::vector<double> cholesky(std::vector<double> a, std::size_t n, int cls) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    require(d > 1e-12, ErrorKind::config,
            "cohort: network correlation matrix of class " + std::to_string(cls) +
                " is not positive definite");
    const double l = std::sqrt(d);
    a[j * n + j] = l;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) v -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = v / l;
    }
    for (std::size_t k = j + 1; k < n; ++k) a[j * n + k] = 0.0;
  }
  return a;
}

}  // namespace

Cohort generate_synthetic_cohort(const SyntheticCohortSpec& spec) {
  spec.validate();
  const std::size_t k = spec.n_networks, n = spec.n_components, total = spec.t_total;
  std::vector<std::vector<double>> factors;
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    std::vector<double> r(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i) r[i * k + i] = 1.0;
    for (const auto& e : spec.effects) {
      if (static_cast<std::size_t>(e.class_id) != c) continue;
      r[e.network_a * k + e.network_b] += e.offset;
      r[e.network_b * k + e.network_a] += e.offset;
      require(std::abs(r[e.network_a * k + e.network_b]) < 1.0, ErrorKind::config,
              "cohort: accumulated offsets push a correlation outside (-1, 1)");
    }
    factors.push_back(cholesky(std::move(r), k, static_cast<int>(c)));
  }

  // Network of each component: contiguous, near-equal groups.
  std::vector<std::size_t> net_of(n);
  for (std::size_t net = 0, comp = 0; net < k; ++net) {
    const std::size_t count = n / k + (net < n % k ? 1 : 0);
    for (std::size_t i = 0; i < count; ++i) net_of[comp++] = net;
  }

  Rng rng(spec.seed);
  Cohort out;
  out.labels.resize(spec.n_subjects);
  for (std::size_t s = 0; s < spec.n_subjects; ++s)
    out.labels[s] = static_cast<int>(s % spec.class_count);
  rng.shuffle(out.labels);

  out.series.tr_seconds = spec.tr_seconds;
  out.series.data = Tensor({spec.n_subjects, total, n});
  const double phi = spec.ar_coefficient;
  const double innov = std::sqrt(1.0 - phi * phi);
  std::vector<double> e(k), lat(k);
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    const auto& l = factors[static_cast<std::size_t>(out.labels[s])];
    for (auto& v : e) v = rng.normal();
    for (std::size_t t = 0; t < total; ++t) {
      if (t > 0)
        for (auto& v : e) v = phi * v + innov * rng.normal();
      for (std::size_t i = 0; i < k; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += l[i * k + j] * e[j];
        lat[i] = acc;
      }
      double* row = out.series.data.ptr() + (s * total + t) * n;
      for (std::size_t c = 0; c < n; ++c)
        row[c] = lat[net_of[c]] + spec.noise_std * rng.normal();
    }
  }
  return out;
}

}  // namespace fstm::dfnc
