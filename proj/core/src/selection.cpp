#include "tense/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "tense/io.hpp"
#include "tense/parallel.hpp"
#include "tense/random.hpp"
#include "tense/stats.hpp"

namespace tense {

namespace {

/// Highest score first, ties to the lower id.
void sort_desc(std::vector<Scored>& v) {
  std::sort(v.begin(), v.end(), [](const Scored& a, const Scored& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
}

void truncate(SelectionResult& r, std::size_t k) {
  if (k == 0) return;
  if (r.ranked.size() < k) {
    r.flagged = true;
    r.note = "only " + std::to_string(r.ranked.size()) + " of " + std::to_string(k) + " available";
  } else {
    r.ranked.resize(k);
  }
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += static_cast<double>(a[i]) * b[i];
  return d;
}

std::vector<float> normalized(std::span<const float> v) {
  const double n = l2_norm(v);
  std::vector<float> out(v.begin(), v.end());
  if (n > 0)
    for (auto& x : out) x = static_cast<float>(x / n);
  return out;
}

}  // namespace

std::string to_string(SelectMode mode) {
  switch (mode) {
    case SelectMode::Mei: return "mei";
    case SelectMode::Mii: return "mii";
    case SelectMode::Mti: return "mti";
    case SelectMode::SpatialTense: return "spatial_tense";
    case SelectMode::ChannelTense: return "channel_tense";
    case SelectMode::NullAttr: return "null_attr";
    case SelectMode::TopNorm: return "top_norm";
  }
  return "?";
}

std::string to_string(NormKind kind) { return kind == NormKind::L1 ? "l1" : "l2"; }

std::vector<std::size_t> SelectionResult::ids() const {
  std::vector<std::size_t> out;
  for (const auto& s : ranked) out.push_back(s.id);
  return out;
}

nlohmann::json SelectionResult::to_json() const {
  nlohmann::json ranked_j = nlohmann::json::array();
  for (const auto& s : ranked) ranked_j.push_back({{"id", s.id}, {"score", s.score}});
  nlohmann::json j{{"mode", to_string(mode)}, {"params", params}, {"ranked", ranked_j}};
  if (flagged) j["flag"] = note;
  return j;
}

std::vector<double> scan_feature(const Model& model, const FeatureRef& feature, const Tensor& inputs) {
  const Tensor x = as_batch(model, inputs);
  const std::size_t N = x.dim(0);
  constexpr std::size_t chunk = 256;
  std::vector<double> out(N);
  parallel_for((N + chunk - 1) / chunk, [&](std::size_t c) {
    const std::size_t s = c * chunk, e = std::min(N, s + chunk);
    std::vector<std::size_t> ids(e - s);
    std::iota(ids.begin(), ids.end(), s);
    const auto v = feature_values(model, forward_trace(model, gather_rows(x, ids)), feature);
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(s));
  });
  return out;
}

ActivationRanking rank_activations(std::span<const double> values, std::size_t k) {
  ActivationRanking r;
  r.mei.mode = SelectMode::Mei;
  r.mii.mode = SelectMode::Mii;
  for (std::size_t i = 0; i < values.size(); ++i) {
    r.mei.ranked.push_back({i, values[i]});
    r.mii.ranked.push_back({i, -values[i]});
  }
  sort_desc(r.mei.ranked);
  sort_desc(r.mii.ranked);
  for (auto& s : r.mii.ranked) s.score = -s.score;
  truncate(r.mei, k);
  truncate(r.mii, k);
  r.mei.params = r.mii.params = {{"k", k}};
  return r;
}

ActivationRanking rank_activations(const Model& model, const FeatureRef& feature,
                                   const Tensor& inputs, std::size_t k) {
  return rank_activations(scan_feature(model, feature, inputs), k);
}

double attribution_norm(const AttributionRecord& r, NormKind kind) {
  return kind == NormKind::L1 ? l1_norm(r.S.data()) : l2_norm(r.S.data());
}

SelectionResult select_mti(std::span<const AttributionRecord> records, std::size_t k, Band band,
                           NormKind norm, std::optional<double> sigma) {
  SelectionResult res;
  res.mode = SelectMode::Mti;
  if (!sigma) {
    std::vector<double> v;
    for (const auto& r : records) v.push_back(r.value);
    sigma = stddev(v);
  }
  const double lo = band.lo * *sigma, hi = band.hi * *sigma;
  for (const auto& r : records)
    if (r.value > lo && r.value < hi) res.ranked.push_back({r.input_id, attribution_norm(r, norm)});
  sort_desc(res.ranked);
  if (res.ranked.empty()) {
    res.flagged = true;
    res.note = "no record inside the activation band";
  } else {
    truncate(res, k);
  }
  res.params = {{"k", k}, {"band", {band.lo, band.hi}}, {"sigma", *sigma}, {"norm", to_string(norm)}};
  return res;
}

SelectionResult select_top_norm(std::span<const AttributionRecord> records, std::size_t k,
                                NormKind norm) {
  SelectionResult res;
  res.mode = SelectMode::TopNorm;
  for (const auto& r : records) res.ranked.push_back({r.input_id, attribution_norm(r, norm)});
  sort_desc(res.ranked);
  truncate(res, k);
  res.params = {{"k", k}, {"norm", to_string(norm)}};
  return res;
}

SelectionResult select_tense(std::span<const AttributionRecord> records, TenseMode mode,
                             Percentiles pct, std::size_t k) {
  SelectionResult res;
  res.mode = mode == TenseMode::Spatial ? SelectMode::SpatialTense : SelectMode::ChannelTense;
  std::vector<double> pooled_a, pooled_b;
  for (const auto& r : records) {
    if (!r.phi_plus || !r.phi_minus) throw InvalidArgument("select_tense needs spatial maps");
    for (std::size_t i = 0; i < r.phi_plus->size(); ++i) {
      const double p = (*r.phi_plus)[i], n = (*r.phi_minus)[i];
      if (mode == TenseMode::Spatial) {
        pooled_a.push_back(p - n);
      } else {
        pooled_a.push_back(p);
        pooled_b.push_back(n);
      }
    }
  }
  if (pooled_a.empty()) throw InvalidArgument("select_tense needs at least one record");
  if (mode == TenseMode::Spatial) {
    const double p_lo = percentile(pooled_a, pct.low), p_hi = percentile(pooled_a, pct.high);
    if (!(p_lo < p_hi)) throw InvalidArgument("degenerate percentiles: P_low equals P_high");
    for (const auto& r : records) {
      double mn = std::numeric_limits<double>::infinity(), mx = -mn;
      for (std::size_t i = 0; i < r.phi_plus->size(); ++i) {
        const double d = static_cast<double>((*r.phi_plus)[i]) - (*r.phi_minus)[i];
        mn = std::min(mn, d);
        mx = std::max(mx, d);
      }
      if (mn < p_lo && mx > p_hi) res.ranked.push_back({r.input_id, mx - mn});
    }
    res.params = {{"mode", "spatial"}, {"p_low", p_lo}, {"p_high", p_hi}};
  } else {
    const double t_lo_p = percentile(pooled_a, pct.low), tp = percentile(pooled_a, pct.high);
    const double t_lo_n = percentile(pooled_b, pct.low), tn = percentile(pooled_b, pct.high);
    if (!(t_lo_p < tp) || !(t_lo_n < tn))
      throw InvalidArgument("degenerate percentiles: P_low equals P_high");
    for (const auto& r : records) {
      const auto& P = r.phi_plus->data();
      const auto& Nm = r.phi_minus->data();
      const auto ap = static_cast<std::size_t>(std::max_element(P.begin(), P.end()) - P.begin());
      const auto an = static_cast<std::size_t>(std::max_element(Nm.begin(), Nm.end()) - Nm.begin());
      if (ap == an && P[ap] > tp && Nm[an] > tn)
        res.ranked.push_back({r.input_id, std::min(P[ap] / tp, Nm[an] / tn)});
    }
    res.params = {{"mode", "channel"}, {"p_high_plus", tp}, {"p_high_minus", tn}};
  }
  res.params["percentiles"] = {pct.low, pct.high};
  sort_desc(res.ranked);
  truncate(res, k);
  return res;
}

SelectionResult select_null_attr(std::span<const AttributionRecord> records, std::size_t k) {
  SelectionResult res;
  res.mode = SelectMode::NullAttr;
  for (const auto& r : records) res.ranked.push_back({r.input_id, -(r.E_plus + r.E_minus)});
  sort_desc(res.ranked);
  for (auto& s : res.ranked) s.score = -s.score;
  truncate(res, k);
  res.params = {{"k", k}};
  return res;
}

nlohmann::json ScatterExport::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points)
    pts.push_back({{"id", p.id}, {"E_plus", p.E_plus}, {"E_minus", p.E_minus}, {"activation", p.activation}});
  return {{"points", pts}, {"contours", contours}, {"color_max", color_max}};
}

ScatterExport export_scatter(std::span<const AttributionRecord> records, std::size_t contours) {
  if (records.empty()) throw InvalidArgument("export_scatter needs at least one record");
  ScatterExport out;
  for (const auto& r : records) {
    out.points.push_back({r.input_id, r.E_plus, r.E_minus, r.value});
    out.color_max = std::max(out.color_max, std::abs(r.value));
  }
  const double cmax = out.color_max > 0 ? out.color_max : 1.0;
  if (contours == 1) out.contours = {0.0};
  for (std::size_t i = 0; contours > 1 && i < contours; ++i)
    out.contours.push_back(-cmax + 2 * cmax * static_cast<double>(i) / static_cast<double>(contours - 1));
  return out;
}

std::string render_scatter(const ScatterExport& data, const std::string& title) {
  std::vector<ScatterPoint> pts;
  for (const auto& p : data.points) pts.push_back({p.E_minus, p.E_plus, p.activation});
  ScatterOptions o;
  o.title = title;
  o.contours = data.contours;
  o.color_max = data.color_max;
  return svg_scatter(pts, o);
}

KMeansBasis spherical_kmeans(const std::vector<std::vector<float>>& vectors, std::size_t k,
                             std::uint64_t seed, std::size_t max_iter) {
  if (k < 2) throw InvalidArgument("k-means needs k >= 2");
  KMeansBasis out;
  out.seed = seed;
  std::vector<std::vector<float>> x;
  std::vector<std::size_t> origin;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (l2_norm(vectors[i]) == 0) {
      ++out.dropped_zero;
      continue;
    }
    x.push_back(normalized(vectors[i]));
    origin.push_back(i);
  }
  const std::size_t N = x.size();
  if (k > N) throw InvalidArgument("k-means: k = " + std::to_string(k) + " exceeds the " +
                                   std::to_string(N) + " nonzero samples");
  const std::size_t D = x[0].size();
  Rng rng(seed);

  // k-means++ with distance 1 - cos.
  std::vector<std::vector<float>> c;
  c.push_back(x[rng.below(N)]);
  std::vector<double> best(N, std::numeric_limits<double>::infinity());
  while (c.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < N; ++i) {
      best[i] = std::min(best[i], std::max(0.0, 1.0 - cosine(x[i], c.back())));
      total += best[i];
    }
    std::size_t pick = 0;
    if (total <= 0) {
      pick = rng.below(N);
    } else {
      double r = rng.uniform() * total;
      for (pick = 0; pick + 1 < N; ++pick) {
        r -= best[pick];
        if (r < 0) break;
      }
    }
    c.push_back(x[pick]);
  }

  std::vector<std::size_t> assign(N, k);
  for (out.iterations = 0; out.iterations < max_iter;) {
    ++out.iterations;
    bool changed = false;
    std::vector<double> sim(N);
    for (std::size_t i = 0; i < N; ++i) {
      std::size_t arg = 0;
      double s = -2;
      for (std::size_t j = 0; j < k; ++j) {
        const double v = cosine(x[i], c[j]);
        if (v > s) {
          s = v;
          arg = j;
        }
      }
      sim[i] = s;
      changed |= assign[i] != arg;
      assign[i] = arg;
    }
    std::vector<std::vector<double>> sums(k, std::vector<double>(D, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < N; ++i) {
      ++counts[assign[i]];
      for (std::size_t d = 0; d < D; ++d) sums[assign[i]][d] += x[i][d];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        // Re-seed from the point worst served by its centroid.
        const auto far = static_cast<std::size_t>(std::min_element(sim.begin(), sim.end()) - sim.begin());
        c[j] = x[far];
        sim[far] = 2;
        assign[far] = j;
        ++out.reseeded;
        changed = true;
        continue;
      }
      std::vector<float> v(D);
      for (std::size_t d = 0; d < D; ++d) v[d] = static_cast<float>(sums[j][d]);
      c[j] = l2_norm(v) > 0 ? normalized(v) : x[rng.below(N)];
    }
    if (!changed) break;
  }
  out.centroids = std::move(c);
  out.assignment.assign(vectors.size(), k);
  for (std::size_t i = 0; i < N; ++i) out.assignment[origin[i]] = assign[i];
  return out;
}

std::vector<std::vector<float>> sample_hidden_vectors(const Model& model, const std::string& layer,
                                                      const Tensor& inputs, std::uint64_t seed) {
  const StageInfo& st = model.stage(layer);
  const Tensor x = as_batch(model, inputs);
  const std::size_t N = x.dim(0), C = st.shape[0];
  Rng rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> pos(N, {0, 0});
  if (st.shape.size() == 3)
    for (auto& p : pos) p = {rng.below(st.shape[1]), rng.below(st.shape[2])};
  std::vector<std::vector<float>> out(N, std::vector<float>(C));
  constexpr std::size_t chunk = 256;
  parallel_for((N + chunk - 1) / chunk, [&](std::size_t c) {
    const std::size_t s = c * chunk, e = std::min(N, s + chunk);
    std::vector<std::size_t> ids(e - s);
    std::iota(ids.begin(), ids.end(), s);
    const auto trace = forward_trace(model, gather_rows(x, ids));
    const Tensor& h = st.has_relu ? trace.post.at(layer) : trace.pre.at(layer);
    const std::size_t per = h.size() / ids.size();
    const std::size_t hw = st.shape.size() == 3 ? st.shape[1] * st.shape[2] : 1;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto [r, col] = pos[s + k];
      const std::size_t off = st.shape.size() == 3 ? r * st.shape[2] + col : 0;
      for (std::size_t ch = 0; ch < C; ++ch) out[s + k][ch] = h[k * per + ch * hw + off];
    }
  });
  return out;
}

KMeansBasis kmeans_features(const Model& model, const std::string& layer, const Tensor& inputs,
                            std::size_t k, std::uint64_t seed) {
  return spherical_kmeans(sample_hidden_vectors(model, layer, inputs, derive_seed(seed, 1)), k,
                          derive_seed(seed, 2));
}

std::vector<std::vector<float>> kmeans_two_stage(const KMeansBasis& first, std::size_t k2,
                                                 std::uint64_t seed) {
  const KMeansBasis second = spherical_kmeans(first.centroids, k2, derive_seed(seed, 3));
  Rng rng(derive_seed(seed, 4));
  std::vector<std::vector<float>> out;
  for (std::size_t j = 0; j < k2; ++j) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < second.assignment.size(); ++i)
      if (second.assignment[i] == j) members.push_back(i);
    if (members.empty()) continue;
    out.push_back(first.centroids[members[rng.below(members.size())]]);
  }
  return out;
}

double uniqueness(const std::vector<std::vector<std::size_t>>& sets) {
  if (sets.empty()) throw InvalidArgument("uniqueness needs at least one set");
  const std::size_t m = sets[0].size();
  if (m == 0) throw InvalidArgument("uniqueness needs non-empty sets");
  std::set<std::size_t> all;
  for (const auto& s : sets) {
    if (s.size() != m) throw InvalidArgument("uniqueness: sets must all have size " + std::to_string(m));
    all.insert(s.begin(), s.end());
  }
  return static_cast<double>(all.size()) / static_cast<double>(sets.size() * m);
}

}  // namespace tense
