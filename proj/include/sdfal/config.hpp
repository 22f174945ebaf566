#pragma once

// Run configuration: every tunable of scene generation, rendering,
// initialization, refinement, verification, the curriculum, the oracle
// schedule, evaluation and decoder training, read from one JSON document.
// Missing keys keep their defaults; unknown keys are a UsageError.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "sdfal/decoder.hpp"
#include "sdfal/experiments.hpp"
#include "sdfal/isosurface.hpp"
#include "sdfal/pipeline.hpp"

namespace sdfal {

struct RunConfig {
  std::uint64_t seed = 0;
  int loops = 2;
  Difficulty stage = Difficulty::kModerate;  // highest stage of the curriculum
  int jobs = 0;                              // 0: available cores
  SceneConfig scene;
  QueryGrid grid;
  double band = kDefaultBand;
  LoopConfig loop;  // its stage and jobs are set per run
  std::vector<OracleNoise> oracle = default_oracle_schedule();
  std::vector<MetricColumn> metrics = default_metric_columns();
  DecoderTrainConfig decoder;

  // Loop 1 sigma 0.08, dropout 0.10, 10 deg; loop 2 sigma 0.03, dropout 0.05, 5 deg.
  static std::vector<OracleNoise> default_oracle_schedule();

  SurfaceExtractor extractor() const;
  // Stage of loop i (0-based): easy first, one step harder per loop, capped at `stage`.
  Difficulty stage_of(int loop) const;
};

RunConfig load_run_config(std::istream& in);
RunConfig load_run_config_file(const std::string& path);
// Complete document, every key present; loading it reproduces the config.
void write_run_config(std::ostream& out, const RunConfig& config);

}  // namespace sdfal
