#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "commands.hpp"
#include "config.hpp"
#include "rawformer/errors.hpp"
#include "scratch.hpp"

using namespace rawformer;
using namespace rawformer::cli;

namespace {

using Flags = std::vector<std::pair<std::string, std::string>>;

// Small settings that keep a full pretrain + train cycle to a few seconds.
Flags tiny(const std::filesystem::path& root) {
  return {{"run_dir", (root / "run").string()},
          {"data_root", (root / "data").string()},
          {"n_train", "2"},
          {"n_test", "1"},
          {"image_size", "32"},
          {"crop", "16"},
          {"levels", "2"},
          {"base_channels", "4"},
          {"vit_depth", "1"},
          {"vit_heads", "1"},
          {"cqa_heads", "1"},
          {"disc_base_channels", "4"},
          {"pretrain_epochs", "1"},
          {"pretrain_batch", "2"},
          {"mask_block", "4"},
          {"epochs", "1"},
          {"steps_per_epoch", "1"}};
}

int run(const std::string& cmd, const Flags& flags, std::string* out_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_command(cmd, parse_config(std::nullopt, flags), out, err);
  if (out_text) *out_text = out.str();
  return code;
}

int run_binary(const std::string& args) {
  const std::string line = std::string(RAWFORMER_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(line.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("empty config gives the schema defaults") {
    const RunConfig c = parse_config(std::nullopt, {});
    for (const auto& k : config_schema()) CHECK(c.text(k.name) == RunConfig::defaults().text(k.name));
    CHECK(c.real("beta2") == 10.0);
    CHECK(c.text("generator") == "G5");
  }

  TEST_CASE("flags override the file, the file overrides defaults") {
    testing::ScratchDir dir("cli");
    testing::spit(dir / "run.cfg", "# loss weights\nbeta2 = 10\nbeta3 = 7\n");
    const RunConfig c = parse_config(dir / "run.cfg", {{"beta2", "0.5"}});
    CHECK(c.real("beta2") == 0.5);
    CHECK(c.real("beta3") == 7.0);
  }

  TEST_CASE("paper-scale preset sits between defaults and the file") {
    testing::ScratchDir dir("cli");
    testing::spit(dir / "run.cfg", "epochs = 3\n");
    const RunConfig c = parse_config(dir / "run.cfg", {}, true);
    CHECK(c.integer("epochs") == 3);
    CHECK(c.integer("pretrain_epochs") == 500);
    CHECK(c.real("pretrain_lr") == 0.005);
    CHECK(c.integer("mask_block") == 32);
    CHECK_NOTHROW(pretrain_config(c));
  }

  TEST_CASE("unknown keys and bad values name the key") {
    testing::ScratchDir dir("cli");
    testing::spit(dir / "bad.cfg", "betaX = 1\n");
    try {
      parse_config(dir / "bad.cfg", {});
      FAIL("expected a config error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("betaX") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config(std::nullopt, {{"levels", "99"}}), ConfigError);
    CHECK_THROWS_AS(parse_config(std::nullopt, {{"generator", "G7"}}), ConfigError);
    CHECK_THROWS_AS(parse_config(std::nullopt, {{"noise", "maybe"}}), ConfigError);
    CHECK_THROWS_AS(parse_config_text("no equals sign here\n"), ConfigError);
  }

  TEST_CASE("dumped config parses back to itself") {
    testing::ScratchDir dir("cli");
    RunConfig c = parse_config(std::nullopt, {{"beta3", "10"}, {"generator", "G2"}});
    testing::spit(dir / "dump.cfg", c.dump());
    CHECK(parse_config(dir / "dump.cfg", {}).values() == c.values());
  }

  TEST_CASE("split_list drops empty items") {
    CHECK(split_list("a,,b, c") == std::vector<std::string>{"a", "b", "c"});
    CHECK(split_list("").empty());
  }

  TEST_CASE("synth refuses a populated root unless overwrite is set") {
    testing::ScratchDir dir("cli");
    const Flags f = tiny(dir.path());
    CHECK(run("synth", f) == kExitOk);
    CHECK(run("synth", f) == kExitConfig);
    Flags g = f;
    g.emplace_back("overwrite", "true");
    CHECK(run("synth", g) == kExitOk);
  }

  TEST_CASE("unknown command is a config failure") {
    std::ostringstream out, err;
    CHECK(run_command("frobnicate", RunConfig::defaults(), out, err) == kExitConfig);
    CHECK(err.str().find("frobnicate") != std::string::npos);
  }

  TEST_CASE("pretrain, train, translate and eval chain together") {
    testing::ScratchDir dir("cli");
    Flags f = tiny(dir.path());
    REQUIRE(run("synth", f) == kExitOk);
    Flags p = f;
    p.emplace_back("run_dir", (dir / "pre").string());
    REQUIRE(run("pretrain", p) == kExitOk);
    CHECK(std::filesystem::exists(dir / "pre" / "train.csv"));
    Flags t = f;
    t.emplace_back("run_dir", (dir / "gan").string());
    t.emplace_back("init", (dir / "pre" / "ckpt" / "pretrain.rfck").string());
    const int trained = run("train", t);
    REQUIRE(trained == kExitOk);
    const auto ckpt = dir / "gan" / "ckpt" / "gan.rfck";
    REQUIRE(std::filesystem::exists(ckpt));
    Flags e = f;
    e.emplace_back("run_dir", (dir / "gan").string());
    e.emplace_back("checkpoint", ckpt.string());
    CHECK(run("translate", e) == kExitOk);
    CHECK(run("eval", e) == kExitOk);
    CHECK(std::filesystem::exists(dir / "gan" / "eval" / "metrics.csv"));
    const std::string cross = testing::slurp(dir / "gan" / "eval" / "cross_domain.csv");
    CHECK(std::count(cross.begin(), cross.end(), '\n') == 5);
  }

  TEST_CASE("eval with a missing checkpoint is a runtime failure") {
    testing::ScratchDir dir("cli");
    Flags f = tiny(dir.path());
    REQUIRE(run("synth", f) == kExitOk);
    f.emplace_back("checkpoint", (dir / "absent.rfck").string());
    CHECK(run("eval", f) == kExitRuntime);
  }

  TEST_CASE("ablate writes one row per generator row") {
    testing::ScratchDir dir("cli");
    Flags f = tiny(dir.path());
    REQUIRE(run("synth", f) == kExitOk);
    f.emplace_back("eval_every", "0");
    CHECK(run("ablate", f) == kExitOk);
    const std::string csv = testing::slurp(dir / "run" / "ablation.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
    CHECK(csv.find("\nG1,D4,") != std::string::npos);
    CHECK(csv.find("\nG5,D4,") != std::string::npos);
  }

  TEST_CASE("ablate validates the grid before training") {
    testing::ScratchDir dir("cli");
    Flags f = tiny(dir.path());
    REQUIRE(run("synth", f) == kExitOk);
    f.emplace_back("ablate_cqa", "query:bogus");
    CHECK(run("ablate", f) == kExitConfig);
    CHECK(!std::filesystem::exists(dir / "run" / "ablation.csv"));
  }

  TEST_CASE("bench counts attention products with the r^2 ratio") {
    for (int n : {256, 1024}) {
      const AttentionCost c = attention_cost(n, 16, 2, 2, 0);
      CHECK(c.dense == 4 * c.cqa_products);
    }
    const AttentionCost c4 = attention_cost(256, 16, 2, 4, 0);
    CHECK(c4.dense == 16 * c4.cqa_products);
    testing::ScratchDir dir("cli");
    std::string text;
    CHECK(run("bench", {{"run_dir", dir.path().string()}, {"bench_tokens", "64,256"}, {"bench_reps", "0"}}, &text) ==
          kExitOk);
    CHECK(std::filesystem::exists(dir / "bench.csv"));
    CHECK(run("bench", {{"run_dir", dir.path().string()}, {"bench_tokens", "63"}}) != kExitOk);
  }

  TEST_CASE("gradcheck on a filtered subset passes") {
    testing::ScratchDir dir("cli");
    std::string text;
    CHECK(run("gradcheck", {{"run_dir", dir.path().string()}, {"gradcheck_filter", "spfn"}}, &text) == kExitOk);
    CHECK(text.find("PASS spfn") != std::string::npos);
    CHECK(run("gradcheck", {{"run_dir", dir.path().string()}, {"gradcheck_filter", "no-such-case"}}) == kExitConfig);
  }

  TEST_CASE("binary exit codes") {
    testing::ScratchDir dir("cli");
    CHECK(run_binary("--help") == kExitOk);
    CHECK(run_binary("") == kExitConfig);
    CHECK(run_binary("synth --betaX 1") == kExitConfig);
    CHECK(run_binary("synth --levels 0") == kExitConfig);
    const std::string base = "--run_dir " + dir.path().string() + " --data_root " + (dir / "data").string() +
                             " --n_train 1 --n_test 1 --image_size 32";
    CHECK(run_binary("synth " + base) == kExitOk);
    CHECK(run_binary("synth " + base) == kExitConfig);
    CHECK(run_binary("synth --overwrite " + base) == kExitOk);
    CHECK(run_binary("eval " + base + " --checkpoint " + (dir / "none.rfck").string()) == kExitRuntime);
  }
}
