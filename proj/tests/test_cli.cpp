#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "diffsal/commands.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr
};

Run run(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "diffsal_test_cli.log";
  const std::string cmd = std::string(DIFFSAL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  Run r;
  const int status = std::system(cmd.c_str());
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "diffsal_test_cli" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("invalid flag values exit nonzero with a usage message") {
  for (const char* args : {"", "--jobs 0 synth", "--seed abc synth", "synth --n -2", "train --data x --mode stereo",
                           "train --data x --loss l1", "sample --data x --checkpoint /nonexistent --steps 4",
                           "--set model.fusion=sum synth", "--set nokey=1 synth", "frobnicate"}) {
    const Run r = run(args);
    CHECK_MESSAGE(r.code != 0, args);
    CHECK_MESSAGE(r.output.find("Usage: diffsal") != std::string::npos, args);
  }
  const Run help = run("--help");
  CHECK(help.code == 0);
  CHECK(help.output.find("ablate") != std::string::npos);
}

TEST_CASE("synth, train, sample and eval run end to end and reproducibly") {
  const fs::path root = fresh_dir("pipeline");
  const std::string r = root.string();
  auto pipeline = [&](const std::string& tag) {
    const std::string data = r + "/data_" + tag, runs = r + "/run_" + tag, pred = r + "/pred_" + tag,
                      rep = r + "/rep_" + tag;
    REQUIRE(run("--seed 3 --out " + data + " synth").code == 0);
    REQUIRE(run("--seed 3 --out " + runs + " train --data " + data + " --max-steps 6").code == 0);
    REQUIRE(run("--seed 3 --out " + pred + " sample --data " + data + " --checkpoint " + runs + "/model.dstn").code ==
            0);
    const Run ev = run("--seed 3 --out " + rep + " eval --pred " + pred + " --data " + data);
    REQUIRE(ev.code == 0);
    CHECK(ev.output.find("mean") != std::string::npos);
    return std::make_tuple(fs::path(data), fs::path(runs), fs::path(pred), fs::path(rep));
  };
  const auto [d1, r1, p1, e1] = pipeline("a");
  const auto [d2, r2, p2, e2] = pipeline("b");
  CHECK(slurp(d1 / "manifest.tsv").size() > 0);
  CHECK(slurp(r1 / "model.dstn") == slurp(r2 / "model.dstn"));
  int maps = 0;
  for (const auto& e : fs::directory_iterator(p1)) {
    CHECK(slurp(e.path()) == slurp(p2 / e.path().filename()));
    ++maps;
  }
  CHECK(maps == 8);
  CHECK(slurp(e1 / "metrics.csv") == slurp(e2 / "metrics.csv"));
  CHECK(slurp(e1 / "metrics.csv").rfind("sample,cc,nss,aucj,sim,kl\n", 0) == 0);

  // eval against a directory with a missing prediction fails and names it
  fs::remove(p2 / "00003.pgm");
  const Run bad = run("--out " + r + "/rep_bad eval --pred " + p2.string() + " --data " + d1.string());
  CHECK(bad.code != 0);
  CHECK(bad.output.find("00003") != std::string::npos);
}

TEST_CASE("ablate writes the factor tables and the loss ranking line") {
  const fs::path root = fresh_dir("ablate");
  diffsal::RunConfig cfg;
  cfg.out = (root / "data").string();
  cfg.dataset_size = 2;
  REQUIRE(diffsal::cli::cmd_synth(cfg).size() == 2);
  cfg.out = (root / "report").string();
  cfg.set("ablate.fusion", "mim");
  cfg.set("ablate.attention", "eca");
  cfg.set("ablate.mode", "av,video_only");
  cfg.set("ablate.steps", "1,2");
  cfg.set("ablate.train_steps", "2");
  const auto rep = diffsal::cli::cmd_ablate(cfg, (root / "data").string());
  CHECK(rep.rows.size() == 3 * 2 * 2);
  for (const char* s : {"modality", "denoising steps", "fusion", "cross-attention", "loss", "video_only",
                        "loss ranking mse >= kl >= ce by CC: "}) {
    CHECK_MESSAGE(rep.text.find(s) != std::string::npos, s);
  }
  CHECK(slurp(root / "report" / "ablation.csv") == rep.csv);
  CHECK(std::count(rep.csv.begin(), rep.csv.end(), '\n') == 13);
}
