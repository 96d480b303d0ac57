#include "dap/pose.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <optional>

#include "dap/parallel.hpp"

namespace dap {

int default_thread_count() {
  if (const char* env = std::getenv("DAP_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int collision_count(const PointCloud& cropped_container, const PointCloud& placed_object, double margin) {
  const Aabb box = aabb_of(placed_object, margin);
  int count = 0;
  for (Eigen::Index i = 0; i < cropped_container.size(); ++i) {
    if (box.contains_strictly(cropped_container.position(i))) ++count;
  }
  return count;
}

std::vector<int> rank_order(const std::vector<Candidate>& cands) {
  if (cands.empty()) throw NoCandidatesError("no candidates to rank");
  std::vector<int> order(cands.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const Candidate& ca = cands[static_cast<size_t>(a)];
    const Candidate& cb = cands[static_cast<size_t>(b)];
    if (ca.collision_count != cb.collision_count) return ca.collision_count < cb.collision_count;
    return ca.match_count > cb.match_count;
  });
  return order;
}

std::vector<Candidate> rank_candidates(const std::vector<Candidate>& cands) {
  std::vector<Candidate> out;
  for (int i : rank_order(cands)) out.push_back(cands[static_cast<size_t>(i)]);
  return out;
}

Candidate build_candidate(const AffordanceSampler& sampler, const CorrPredictor& corr, const PointCloud& container,
                          const PointCloud& object, const InferenceOptions& opts, std::uint64_t seed, int index) {
  const AffordanceField scores = sampler(container, seed);
  if (scores.size() != container.size()) throw ShapeError("affordance sampler returned the wrong number of scores");
  const auto crop_idx = crop_indices_by_scores(scores);
  if (static_cast<int>(crop_idx.size()) < opts.min_crop_points) {
    throw InsufficientMatchesError("crop holds " + std::to_string(crop_idx.size()) + " points, need " +
                                   std::to_string(opts.min_crop_points));
  }
  const PointCloud crop = select(container, std::span<const int>(crop_idx));
  const CorrespondenceMatrix pred = corr(crop, object);

  CorrConfig match_cfg;
  match_cfg.match_threshold = opts.match_threshold;
  const MatchSet matches = extract_matches(pred, object, crop, match_cfg);

  const auto m = static_cast<Eigen::Index>(matches.size());
  Points3 src(m, 3), dst(m, 3);
  Eigen::VectorXd w(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Match& mt = matches[static_cast<size_t>(r)];
    src.row(r) = object.positions.row(mt.object_index);
    dst.row(r) = crop.positions.row(mt.container_index);
    w(r) = mt.weight;
  }
  Candidate c;
  c.transform = arun_solve<double>(src, dst, w);
  c.collision_count = collision_count(crop, apply_transform(object, c.transform), opts.collision_margin);
  c.match_count = static_cast<int>(m);
  c.crop_size = static_cast<int>(crop.size());
  c.sample_index = index;
  return c;
}

InferenceResult infer_storage_pose(const AffordanceSampler& sampler, const CorrPredictor& corr,
                                   const PointCloud& container, const PointCloud& object, const InferenceOptions& opts,
                                   std::uint64_t seed) {
  if (opts.K < 1) throw ConfigError("infer: K must be >= 1");
  std::vector<std::optional<Candidate>> built(static_cast<size_t>(opts.K));
  std::vector<std::optional<CandidateFailure>> failed(static_cast<size_t>(opts.K));
  parallel_for(opts.K, opts.threads, [&](int k) {
    try {
      built[static_cast<size_t>(k)] =
          build_candidate(sampler, corr, container, object, opts, seed + static_cast<std::uint64_t>(k), k);
    } catch (const EmptyCropError& e) {
      failed[static_cast<size_t>(k)] = CandidateFailure{k, e.kind(), e.what()};
    } catch (const InsufficientMatchesError& e) {
      failed[static_cast<size_t>(k)] = CandidateFailure{k, e.kind(), e.what()};
    } catch (const DegenerateGeometryError& e) {
      failed[static_cast<size_t>(k)] = CandidateFailure{k, e.kind(), e.what()};
    }
  });

  InferenceResult result;
  std::vector<Candidate> survivors;
  for (int k = 0; k < opts.K; ++k) {
    if (built[static_cast<size_t>(k)]) survivors.push_back(*built[static_cast<size_t>(k)]);
    if (failed[static_cast<size_t>(k)]) result.failures.push_back(*failed[static_cast<size_t>(k)]);
  }
  if (survivors.empty()) {
    std::string msg = "all " + std::to_string(opts.K) + " candidates failed:";
    for (const auto& f : result.failures) msg += " #" + std::to_string(f.sample_index) + "=" + f.kind;
    throw NoCandidatesError(msg);
  }
  result.ranked = rank_candidates(survivors);
  result.best = result.ranked.front();
  return result;
}

InferenceResult infer_storage_pose(const AffordanceModel& afford, const CorrModel& corr, const PointCloud& container,
                                   const PointCloud& object, const NoiseSchedule& sched, const InferenceOptions& opts,
                                   std::uint64_t seed) {
  const NoisePredictor predictor = afford.frozen_predictor(container);
  const AffordanceSampler sampler = [&](const PointCloud& pc, std::uint64_t s) {
    return sample_affordance(predictor, static_cast<int>(pc.size()), sched, s, false).clamped;
  };
  const CorrPredictor corr_fn = [&](const PointCloud& crop, const PointCloud& obj) { return corr.predict(crop, obj); };
  return infer_storage_pose(sampler, corr_fn, container, object, opts, seed);
}

}  // namespace dap
