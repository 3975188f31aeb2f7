#include <doctest.h>

#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "nxn/checkpoint.hpp"
#include "nxn/config.hpp"
#include "nxn/errors.hpp"
#include "nxn/net.hpp"
#include "nxn/random.hpp"
#include "nxn/runner.hpp"

using namespace nxn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() /
                     ("nxn_test_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) {
  const std::string s = slurp(p);
  return {s.begin(), s.end()};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string l;
  while (std::getline(ss, l)) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    out.push_back(l);
  }
  return out;
}

std::vector<std::string> split(const std::string& l) {
  std::vector<std::string> out;
  std::stringstream ss(l);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

// Rows of an unquoted CSV keyed by header.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  const auto ls = lines(slurp(p));
  std::vector<std::map<std::string, std::string>> rows;
  if (ls.empty()) return rows;
  const auto header = split(ls[0]);
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const auto f = split(ls[i]);
    std::map<std::string, std::string> row;
    for (std::size_t k = 0; k < header.size() && k < f.size(); ++k) row[header[k]] = f[k];
    rows.push_back(row);
  }
  return rows;
}

// Drops the last CSV field of every line (the wall-clock column).
std::string without_last_column(const std::string& csv) {
  std::string out;
  for (const auto& l : lines(csv)) out += l.substr(0, l.rfind(',')) + "\n";
  return out;
}

std::string error_text(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

json tiny_denoiser_config(std::size_t iters) {
  return json{{"task", "train-denoiser"},
              {"seed", 5},
              {"architecture", {{"n_blocks", 2}, {"channels", 4}, {"alpha", 0.5}}},
              {"optimizer",
               {{"iters", iters}, {"lr_min", 1e-5}, {"lr_max", 1e-4}, {"eval_every", 5}}},
              {"data", {{"size", 8}, {"n_train", 16}, {"n_val", 4}, {"n_test", 4}}}};
}

json tiny_classifier_config() {
  return json{{"task", "train-classifier"},
              {"seed", 2},
              {"architecture", {{"stage_channels", {4, 8}}, {"blocks_per_stage", 1}}},
              {"optimizer",
               {{"iters", 20}, {"lr_min", 3e-3}, {"lr_max", 3e-2}, {"batch_size", 4},
                {"eval_every", 10}}},
              {"data", {{"n_train", 32}, {"n_val", 16}, {"n_test", 16}}}};
}

}  // namespace

TEST_CASE("config parsing resolves defaults and rejects unknown keys") {
  const auto c = parse_config(json{{"task", "train-denoiser"}});
  CHECK(c.data.kind == "synth_denoise");
  CHECK(c.data.size == 16);
  CHECK(c.data.noise_sigma == 0.15);
  CHECK(c.architecture.tableau == "euler");
  const auto k = parse_config(json{{"task", "train-classifier"}});
  CHECK(k.data.kind == "toy_classify");
  CHECK(k.data.size == 8);

  const json bad = {{"task", "verify"}, {"colour", 1}, {"architecture", {{"blocks", 3}}},
                    {"pnp", {{"kernal", 9}}}};
  const std::string msg = error_text([&] { parse_config(bad); });
  CHECK(msg.find("colour") != std::string::npos);
  CHECK(msg.find("architecture.blocks") != std::string::npos);
  CHECK(msg.find("pnp.kernal") != std::string::npos);
  CHECK_THROWS_AS(parse_config(bad), ConfigError);

  CHECK_THROWS_AS(parse_config(json{{"task", "train"}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"task", "verify"}, {"architecture", {{"tableau", "midpoint"}}}}),
                  ConfigError);
  CHECK_THROWS_AS(
      parse_config(json{{"task", "verify"}, {"architecture", {{"contraction_budget", 2.5}}}}),
      ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"task", "attack-eval"}, {"attack", {{"eps_grid", json::array()}}}}),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"task", "pnp-deblur"}, {"pnp", {{"kernel", 4}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"task", "verify"}, {"optimizer", {{"momentum", 1.0}}}}),
                  ConfigError);
}

TEST_CASE("the echoed config reproduces itself") {
  const auto c = parse_config(tiny_denoiser_config(3));
  const json echo = to_json(c);
  const auto again = parse_config(echo);
  CHECK(to_json(again) == echo);
  CHECK(config_hash(echo) == config_hash(to_json(again)));
  CHECK(config_hash(echo).size() == 16);
  auto other = tiny_denoiser_config(3);
  other["seed"] = 6;
  CHECK(config_hash(to_json(parse_config(other))) != config_hash(echo));
  CHECK(run_directory_name(c) == "train-denoiser-" + config_hash(echo) + "-s5");
}

TEST_CASE("crc32 matches the standard check value") {
  const char* s = "123456789";
  CHECK(crc32_of(reinterpret_cast<const std::uint8_t*>(s), 9) == 0xCBF43926u);
  CHECK(crc32_of(nullptr, 0) == 0u);
}

TEST_CASE("checkpoint round trip is byte-identical and preserves the forward map") {
  Rng rng(1);
  ArchitectureConfig c;
  c.n_blocks = 3;
  c.channels = 4;
  c.tableau = "heun";
  c.alpha = 0.5;
  c.init_power_iters = 50;
  auto model = build_denoiser(c, {1, 6, 6}, rng);
  const json cfg = {{"note", "x"}};
  const auto bytes = checkpoint_bytes(*model, cfg);
  CHECK(std::memcmp(bytes.data(), "NXN1", 4) == 0);
  const auto loaded = checkpoint_parse(bytes);
  CHECK(loaded.config == cfg);
  CHECK(checkpoint_bytes(*loaded.model, cfg) == bytes);
  for (int i = 0; i < 10; ++i) {
    const Vec x = rng.normal_vector(36);
    CHECK(loaded.model->forward(x) == model->forward(x));
  }
  const auto dir = scratch("ckpt");
  checkpoint_save(*model, (dir / "m.nxn").string(), cfg);
  CHECK(bytes_of(dir / "m.nxn") == bytes);
  const auto from_file = checkpoint_load((dir / "m.nxn").string());
  CHECK(checkpoint_bytes(*from_file.model, cfg) == bytes);

  // Classifier and baseline models too.
  ArchitectureConfig k;
  k.stage_channels = {3, 4};
  k.blocks_per_stage = 1;
  k.init_power_iters = 20;
  auto cls = build_classifier(k, {1, 4, 4}, rng);
  const auto cb = checkpoint_bytes(*cls);
  CHECK(checkpoint_bytes(*checkpoint_parse(cb).model) == cb);
  ArchitectureConfig b = c;
  b.family = "baseline";
  b.alpha = 0.0;
  auto base = build_denoiser(b, {1, 6, 6}, rng);
  const auto bb = checkpoint_bytes(*base);
  const auto lb = checkpoint_parse(bb);
  CHECK(checkpoint_bytes(*lb.model) == bb);
  const Vec x = rng.normal_vector(36);
  CHECK(lb.model->forward(x) == base->forward(x));
}

TEST_CASE("checkpoint load errors name the failure") {
  Rng rng(2);
  ArchitectureConfig c;
  c.n_blocks = 2;
  c.channels = 3;
  c.init_power_iters = 20;
  auto model = build_denoiser(c, {1, 5, 5}, rng);
  const auto bytes = checkpoint_bytes(*model);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 9);
  CHECK(error_text([&] { checkpoint_parse(truncated); }).find("CRC") != std::string::npos);
  CHECK_THROWS_AS(checkpoint_parse(truncated), CheckpointError);
  std::vector<std::uint8_t> tiny(bytes.begin(), bytes.begin() + 6);
  CHECK(error_text([&] { checkpoint_parse(tiny); }).find("truncated") != std::string::npos);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK(error_text([&] { checkpoint_parse(flipped); }).find("CRC") != std::string::npos);

  // A well-formed file from another format version.
  auto versioned = bytes;
  versioned[4] = 2;
  const std::uint32_t crc = crc32_of(versioned.data(), versioned.size() - 4);
  for (int i = 0; i < 4; ++i) versioned[versioned.size() - 4 + i] = (crc >> (8 * i)) & 0xff;
  CHECK(error_text([&] { checkpoint_parse(versioned); }).find("version") != std::string::npos);

  auto magic = bytes;
  magic[0] = 'X';
  const std::uint32_t crc2 = crc32_of(magic.data(), magic.size() - 4);
  for (int i = 0; i < 4; ++i) magic[magic.size() - 4 + i] = (crc2 >> (8 * i)) & 0xff;
  CHECK(error_text([&] { checkpoint_parse(magic); }).find("magic") != std::string::npos);

  CHECK_THROWS_AS(checkpoint_load("/nonexistent/dir/m.nxn"), CheckpointError);
}

TEST_CASE("radius and verify tasks") {
  const auto root = scratch("verify");
  const auto r = run_experiment(json{{"task", "radius"}}, root.string());
  REQUIRE(r.exit_code == kExitOk);
  const auto rows = read_csv(fs::path(r.run_dir) / "radii.csv");
  REQUIRE(rows.size() == 3);
  for (const auto& row : rows) CHECK(std::abs(std::stod(row.at("r")) - 1.0) < 1e-9);
  CHECK(rows[0].at("tableau") == "euler");
  CHECK(fs::exists(fs::path(r.run_dir) / "config.json"));

  const json v = {{"task", "verify"},
                  {"verify", {{"contractivity_samples", 2000}, {"pairs", 200}}}};
  const auto out = run_experiment(v, root.string());
  REQUIRE(out.exit_code == kExitOk);
  CHECK(out.summary.at("contractive_at_r1") == true);
  CHECK(out.summary.at("stability_violations") == 0);
  const auto contr = read_csv(fs::path(out.run_dir) / "contractivity.csv");
  CHECK(contr.size() == 6);
  for (const auto& row : contr)
    if (row.at("tableau") == "euler" && row.at("r") == "1.5") CHECK(std::stoul(row.at("violations")) > 0);
  CHECK(read_csv(fs::path(out.run_dir) / "stability.csv").size() == 6);
}

TEST_CASE("train-denoiser with zero iterations saves the seeded initialization") {
  const auto root = scratch("init");
  const json raw = tiny_denoiser_config(0);
  const auto r = run_experiment(raw, root.string());
  REQUIRE(r.exit_code == kExitOk);
  const auto c = parse_config(raw);
  Rng rng = Rng::from_counters(c.seed, kModelStream);
  auto init = build_denoiser(c.architecture, {1, 8, 8}, rng);
  const json echoed = json::parse(slurp(fs::path(r.run_dir) / "config.json"));
  CHECK(echoed == to_json(c));
  CHECK(bytes_of(fs::path(r.run_dir) / "checkpoint.nxn") == checkpoint_bytes(*init, echoed));
  CHECK(r.summary.at("recertified") == true);
}

TEST_CASE("identical runs produce identical bytes") {
  for (const json& raw : {tiny_denoiser_config(10), tiny_classifier_config()}) {
    const auto a = run_experiment(raw, scratch("det_a").string());
    const auto b = run_experiment(raw, scratch("det_b").string());
    REQUIRE(a.exit_code == kExitOk);
    REQUIRE(b.exit_code == kExitOk);
    const fs::path pa(a.run_dir), pb(b.run_dir);
    CHECK(pa.filename() == pb.filename());
    CHECK(bytes_of(pa / "checkpoint.nxn") == bytes_of(pb / "checkpoint.nxn"));
    CHECK(slurp(pa / "certificates.csv") == slurp(pb / "certificates.csv"));
    CHECK(slurp(pa / "summary.json") == slurp(pb / "summary.json"));
    CHECK(slurp(pa / "config.json") == slurp(pb / "config.json"));
    const std::string ma = slurp(pa / "metrics.csv");
    CHECK(lines(ma).front().ends_with(",wall_ms"));
    CHECK(without_last_column(ma) == without_last_column(slurp(pb / "metrics.csv")));
    // Re-running from the echoed config lands in the same directory with the same bytes.
    const auto echo = run_config_file((pa / "config.json").string(), scratch("det_c").string());
    REQUIRE(echo.exit_code == kExitOk);
    CHECK(fs::path(echo.run_dir).filename() == pa.filename());
    CHECK(bytes_of(fs::path(echo.run_dir) / "checkpoint.nxn") == bytes_of(pa / "checkpoint.nxn"));
  }
}

TEST_CASE("attack-eval and pnp-deblur consume training checkpoints") {
  const auto root = scratch("chain");
  const auto cls = run_experiment(tiny_classifier_config(), root.string());
  REQUIRE(cls.exit_code == kExitOk);
  json atk = {{"task", "attack-eval"},
              {"seed", 2},
              {"data", {{"n_train", 32}, {"n_val", 16}, {"n_test", 16}}},
              {"attack",
               {{"checkpoint", (fs::path(cls.run_dir) / "checkpoint.nxn").string()},
                {"eps_grid", {0.0, 0.2, 0.4}},
                {"pgd_iters", 10}}}};
  const auto a = run_experiment(atk, root.string());
  REQUIRE(a.exit_code == kExitOk);
  CHECK(a.summary.at("certified_violations") == 0);
  const auto curve = read_csv(fs::path(a.run_dir) / "curve.csv");
  REQUIRE(curve.size() == 4);
  CHECK(curve.back().at("eps") == "auc");
  CHECK(std::stod(curve[0].at("accuracy")) == a.summary.at("clean_accuracy").get<double>());

  const auto den = run_experiment(tiny_denoiser_config(5), root.string());
  REQUIRE(den.exit_code == kExitOk);
  json pnp = {{"task", "pnp-deblur"},
              {"seed", 1},
              {"pnp",
               {{"checkpoint", (fs::path(den.run_dir) / "checkpoint.nxn").string()},
                {"size", 16},
                {"kernel", 5},
                {"iters", 300}}}};
  const auto p = run_experiment(pnp, root.string());
  REQUIRE(p.exit_code == kExitOk);
  CHECK(p.summary.at("tau").get<double>() == doctest::Approx(1.0).epsilon(1e-12));
  for (const char* f : {"residuals.csv", "truth.pgm", "blurred.pgm", "adjoint.pgm", "restored.pgm"})
    CHECK(fs::exists(fs::path(p.run_dir) / f));
  CHECK(slurp(fs::path(p.run_dir) / "truth.pgm").starts_with("P5"));

  // A denoiser checkpoint is not a classifier.
  atk["attack"]["checkpoint"] = (fs::path(den.run_dir) / "checkpoint.nxn").string();
  const auto wrong = run_experiment(atk, root.string());
  CHECK(wrong.exit_code == kExitConfig);
  CHECK(fs::exists(fs::path(wrong.run_dir) / "error.json"));
  atk["attack"]["checkpoint"] = (root / "missing.nxn").string();
  CHECK(run_experiment(atk, root.string()).exit_code == kExitCheckpoint);
}

TEST_CASE("invalid configs fail with a machine-readable record") {
  const auto root = scratch("errors");
  const auto r = run_experiment(json{{"task", "verify"}, {"bogus", true}}, root.string());
  CHECK(r.exit_code == kExitConfig);
  CHECK(r.summary.at("status") == "error");
  CHECK(r.summary.at("kind") == "config");
  CHECK(r.summary.at("message").get<std::string>().find("bogus") != std::string::npos);
  std::ofstream(root / "broken.json") << "{ not json";
  CHECK(run_config_file((root / "broken.json").string(), root.string()).exit_code == kExitConfig);
  CHECK(run_config_file((root / "absent.json").string(), root.string()).exit_code == kExitConfig);
}

TEST_CASE("command-line binary") {
  const fs::path bin = fs::path(NXN_BINARY_DIR) / "nxn";
  REQUIRE(fs::exists(bin));
  const auto root = scratch("binary");
  auto run = [&](const std::string& args) {
    const std::string cmd = bin.string() + " " + args + " > " + (root / "out.txt").string() +
                            " 2> " + (root / "err.txt").string();
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  };
  CHECK(run("radius --out " + root.string()) == 0);
  const auto out = lines(slurp(root / "out.txt"));
  REQUIRE(out.size() == 4);
  CHECK(out[0].starts_with("tableau,"));
  std::ofstream(root / "bad.json") << R"({"task": "verify", "extra": 1})";
  CHECK(run("run " + (root / "bad.json").string() + " --out " + root.string()) == kExitConfig);
  CHECK(slurp(root / "err.txt").find("extra") != std::string::npos);
  CHECK(run("attack-eval --eps-grid 0,x --out " + root.string()) == kExitConfig);
  CHECK(run("train-denoiser --iters 0 --seed 3 --out " + root.string()) == 0);
  CHECK(json::parse(slurp(root / "out.txt")).at("iters_done") == 0);
  CHECK(run("nonsense") != 0);
}
