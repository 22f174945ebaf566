#include <sstream>

#include "doctest.h"
#include "sdfal/config.hpp"
#include "sdfal/errors.hpp"

using namespace sdfal;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return load_run_config(in);
}

std::string dump(const RunConfig& c) {
  std::ostringstream out;
  write_run_config(out, c);
  return out.str();
}

}  // namespace

TEST_CASE("defaults carry the published constants") {
  const RunConfig c;
  CHECK(c.band == 0.03);
  CHECK(c.loop.nocs_threshold == 0.2);
  CHECK(c.loop.lidar_threshold == 0.25);
  CHECK(c.loop.ransac.p == 0.9);
  CHECK(c.loop.ransac.w == 0.7);
  CHECK(c.loop.ransac.sample_size == 4);
  CHECK(c.loop.ransac.inlier_threshold == 0.2);
  CHECK(c.loop.refine.iterations == 50);
  CHECK(c.loop.refine.pose_lr == 0.03);
  CHECK(c.loop.refine.scale_lr == 0.01);
  CHECK(c.loop.refine.shape_lr == 0.0005);
  CHECK(c.loop.verify.band == 0.2);
  CHECK(c.loop.verify.min_band_fraction == 0.60);
  CHECK(c.loop.verify.min_mask_iou == 0.70);
  CHECK(c.scene.curriculum.easy_min_height == 40.0);
  CHECK(c.scene.curriculum.moderate_min_height == 25.0);
  CHECK(c.scene.curriculum.moderate_max_iou == 0.30);
  CHECK(c.grid.resolution == 48);
  CHECK(c.oracle.size() == 2);
  CHECK(c.oracle[0].nocs_sigma == 0.08);
  CHECK(c.oracle[1].nocs_sigma == 0.03);
}

TEST_CASE("empty document gives the defaults and dumps round-trip") {
  const RunConfig d = parse("{}");
  CHECK(dump(d) == dump(RunConfig{}));
  RunConfig c;
  c.seed = 77;
  c.stage = Difficulty::kEasy;
  c.loop.refine.pose_lr = 0.1 / 3.0;
  c.loop.nocs_2d = AlignmentProblem::Nocs2d::kSpatial;
  c.oracle = {OracleNoise{0.01, 0.02, 0.3}};
  c.metrics = {{MatchMetric::kCenterDistance, 2.0}};
  c.decoder.hidden = {16, 8, 4};
  const std::string text = dump(c);
  CHECK(dump(parse(text)) == text);
  const RunConfig back = parse(text);
  CHECK(back.loop.refine.pose_lr == c.loop.refine.pose_lr);
  CHECK(back.decoder.hidden == c.decoder.hidden);
}

TEST_CASE("partial documents override only what they name") {
  const RunConfig c = parse(R"({"loop": {"refine": {"iterations": 7}}, "scene": {"lidar": {"dropout": 0.5}}})");
  CHECK(c.loop.refine.iterations == 7);
  CHECK(c.loop.refine.pose_lr == 0.03);
  CHECK(c.scene.lidar.dropout == 0.5);
  CHECK(c.scene.lidar.beams == 64);
}

TEST_CASE("unknown keys and bad values are rejected") {
  CHECK_THROWS_WITH_AS(parse(R"({"sed": 1})"), doctest::Contains("config.sed"), UsageError);
  CHECK_THROWS_WITH_AS(parse(R"({"loop": {"refine": {"lr": 1}}})"), doctest::Contains("loop.refine.lr"), UsageError);
  CHECK_THROWS_WITH_AS(parse(R"({"oracle": [{"sigma": 1}]})"), doctest::Contains("oracle[0].sigma"), UsageError);
  CHECK_THROWS_AS(parse(R"({"loop": {"refine": {"iterations": "many"}}})"), UsageError);
  CHECK_THROWS_AS(parse(R"({"stage": "medium"})"), UsageError);
  CHECK_THROWS_AS(parse(R"({"metrics": [{"metric": "aos", "cutoff": 1}]})"), UsageError);
  CHECK_THROWS_AS(parse(R"({"loops": 0})"), UsageError);
  CHECK_THROWS_AS(parse("{\"seed\": "), UsageError);
  CHECK_THROWS_AS(parse("[]"), UsageError);
}

TEST_CASE("curriculum staging") {
  RunConfig c;
  c.stage = Difficulty::kModerate;
  CHECK(c.stage_of(0) == Difficulty::kEasy);
  CHECK(c.stage_of(1) == Difficulty::kModerate);
  CHECK(c.stage_of(5) == Difficulty::kModerate);
  c.stage = Difficulty::kEasy;
  CHECK(c.stage_of(3) == Difficulty::kEasy);
}
