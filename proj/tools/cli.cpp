#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "xsf/error.hpp"
#include "xsf/pipeline.hpp"

namespace fs = std::filesystem;

namespace xsf::cli {

namespace {

struct Failure {
  int code;
  std::string message;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

const char* const kPretrained = "pretrained.xsfc";
const char* const kAdapted = "adapted.xsfc";

void require_input(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw Failure{kMissingInput, std::string("missing ") + what + ": " + p.string()};
}

fs::path data_root(const RunConfig& cfg, const fs::path& out) {
  return cfg.data_dir.empty() ? out / "data" : fs::path(cfg.data_dir);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
  f.close();
  if (!f) throw Failure{kWriteFailure, "cannot write " + p.string()};
}

IdentityDataset load_data(const RunConfig& cfg, const fs::path& out) {
  const fs::path root = data_root(cfg, out);
  require_input(root, "dataset directory (run gen-data first)");
  return load_dataset(root);
}

Model load_model(const fs::path& p) {
  require_input(p, "checkpoint");
  return load_checkpoint(p);
}

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void gen_data(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto data = generate_benchmark(cfg.benchmark);
  const fs::path root = data_root(cfg, out);
  save_dataset(data, root);
  log << "gen-data: " << data.entries.size() << " images -> " << root.string() << "\n";
}

void run_pretrain_cmd(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  Clock clock;
  const auto data = load_data(cfg, out);
  PretrainLog plog;
  const Model model = run_pretrain(cfg, data, &plog);
  save_checkpoint(model, out / kPretrained);
  std::string text;
  char buf[64];
  for (std::size_t e = 0; e < plog.epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu\t%.8g\n", e, plog.epoch_loss[e]);
    text += buf;
  }
  write_text(out / "pretrain.log", text);
  log << "pretrain: " << plog.epoch_loss.size() << " epochs in " << clock.seconds() << " s -> "
      << (out / kPretrained).string() << "\n";
}

void run_adapt_cmd(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  Clock clock;
  const Model pretrained = load_model(out / kPretrained);
  const auto data = load_data(cfg, out);
  std::vector<AdaptLogRow> rows;
  const Model adapted = run_adapt(cfg, pretrained, data, &rows);
  save_checkpoint(adapted, out / kAdapted);
  write_training_log(rows, out / "train.log");
  log << "adapt: layer_set " << cfg.adapt.layer_set.to_string() << ", " << rows.size() << " steps in "
      << clock.seconds() << " s -> " << (out / kAdapted).string() << "\n";
}

void run_eval_cmd(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  std::vector<std::pair<std::string, fs::path>> models;
  for (const char* name : {"pretrained", "adapted"}) {
    const fs::path p = out / (std::string(name) + ".xsfc");
    if (fs::exists(p)) models.emplace_back(name, p);
  }
  if (models.empty()) throw Failure{kMissingInput, "no checkpoint in " + out.string() + " (run pretrain first)"};
  const auto data = load_data(cfg, out);
  const auto split = identity_split(cfg, data);
  const auto protocol = eval_protocol(data, split.eval);
  std::vector<std::size_t> eval_entries = protocol.cross_gallery;
  eval_entries.insert(eval_entries.end(), protocol.cross_probes.begin(), protocol.cross_probes.end());

  std::string metrics = "model\t";
  bool header = true;
  for (const auto& [name, path] : models) {
    const Model model = load_checkpoint(path);
    const EvalResult r = run_eval(cfg, model, data);
    export_scores(r.cross, out / ("scores_" + name + "_cross.csv"));
    export_scores(r.source, out / ("scores_" + name + "_source.csv"));
    export_embeddings(model, data, eval_entries, out / ("embeddings_" + name + ".xst"));
    std::istringstream lines(format_metrics(r));
    std::string line;
    std::getline(lines, line);
    if (header) metrics += line + "\n";
    header = false;
    while (std::getline(lines, line)) metrics += name + "\t" + line + "\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "eval: %-10s cross eer %.4f auc %.4f | source eer %.4f auc %.4f\n", name.c_str(),
                  r.cross_report.eer, r.cross_report.auc, r.source_report.eer, r.source_report.auc);
    log << buf;
  }
  write_text(out / "metrics.tsv", metrics);
}

void run_ablate_cmd(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const Model pretrained = load_model(out / kPretrained);
  const auto data = load_data(cfg, out);

  struct Cell {
    std::string sweep, value;
    RunConfig cfg;
  };
  std::vector<Cell> cells;
  for (const auto& sweep : cfg.ablate_sweeps) {
    if (sweep == "layer_set") {
      for (const auto& ls : cfg.ablate_layer_sets) {
        Cell c{sweep, ls.to_string(), cfg};
        c.cfg.adapt.layer_set = ls;
        cells.push_back(std::move(c));
      }
    } else if (sweep == "lambda") {
      for (float l : cfg.ablate_lambdas) {
        Cell c{sweep, "", cfg};
        c.cfg.adapt.lambda = l;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", l);
        c.value = buf;
        cells.push_back(std::move(c));
      }
    } else {
      for (double f : cfg.ablate_fractions) {
        Cell c{sweep, "", cfg};
        c.cfg.fraction = f;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", f);
        c.value = buf;
        cells.push_back(std::move(c));
      }
    }
  }

  const fs::path table = out / "ablation.tsv";
  std::ofstream f(table, std::ios::binary);
  if (!f) throw Failure{kWriteFailure, "cannot write " + table.string()};
  f << "sweep\tvalue";
  for (const char* part : {"cross", "source"}) {
    for (const auto& [name, v] : report_metrics(VerificationReport{})) f << '\t' << part << '.' << name;
  }
  f << '\n';
  for (std::size_t i = 0; i < cells.size(); ++i) {
    Clock clock;
    const Model adapted = run_adapt(cells[i].cfg, pretrained, data);
    const EvalResult r = run_eval(cells[i].cfg, adapted, data);
    f << cells[i].sweep << '\t' << cells[i].value;
    char buf[32];
    for (const auto* rep : {&r.cross_report, &r.source_report}) {
      for (const auto& [name, v] : report_metrics(*rep)) {
        std::snprintf(buf, sizeof buf, "\t%.6f", v);
        f << buf;
      }
    }
    f << '\n' << std::flush;
    if (!f) throw Failure{kWriteFailure, "cannot write " + table.string()};
    log << "ablate [" << i + 1 << "/" << cells.size() << "] " << cells[i].sweep << "=" << cells[i].value
        << ": cross eer " << r.cross_report.eer << ", source eer " << r.source_report.eer << " (" << clock.seconds()
        << " s)\n"
        << std::flush;
  }
}

int code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig:
      return kConfig;
    case ErrorKind::CorruptCheckpoint:
    case ErrorKind::CorruptData:
    case ErrorKind::InvalidDataset:
      return kCorruptInput;
    case ErrorKind::Io:
      return kWriteFailure;
    default:
      return kPipeline;
  }
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

std::string help_footer() {
  std::string s = "Exit codes:\n";
  char buf[128];
  for (const auto& e : exit_codes()) {
    std::snprintf(buf, sizeof buf, "  %d  %s\n", e.code, e.meaning);
    s += buf;
  }
  return s;
}

}  // namespace

const std::vector<ExitCodeDoc>& exit_codes() {
  static const std::vector<ExitCodeDoc> codes{
      {kOk, "success"},
      {kInternal, "internal error"},
      {kUsage, "usage error: unknown command or flag, missing argument"},
      {kConfig, "config error: unknown key, bad value, or out-of-range value"},
      {kMissingInput, "missing input: config file, dataset, or checkpoint not found"},
      {kCorruptInput, "corrupt input: unreadable dataset or checkpoint"},
      {kPipeline, "pipeline failure: training or evaluation rejected its inputs"},
      {kWriteFailure, "write failure: cannot create the run directory or an artifact"},
  };
  return codes;
}

const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"gen-data", "pretrain", "adapt", "eval", "ablate"};
  return names;
}

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-spectral adaptation pipeline on a synthetic benchmark", "xsf"};
  app.footer(help_footer());
  app.require_subcommand(1, 1);
  Options opt;
  app.add_option("--config", opt.config, "Run config, `key = value` lines")->required();
  app.add_option("--seed", opt.seed, "Overrides the config seed");
  app.add_option("--out", opt.out, "Run directory (default: run)");
  const std::vector<std::pair<std::string, std::string>> descriptions{
      {"gen-data", "Render the synthetic dataset into <out>/data or data_dir"},
      {"pretrain", "Train the backbone on source images, write pretrained.xsfc"},
      {"adapt", "Adapt pretrained.xsfc, write adapted.xsfc and train.log"},
      {"eval", "Score every checkpoint in <out>, write scores, embeddings, metrics.tsv"},
      {"ablate", "Adapt and evaluate each configured grid cell, write ablation.tsv"},
  };
  for (const auto& [name, text] : descriptions) app.add_subcommand(name, text)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "xsf: usage error: " << one_line(e.what()) << " (see --help)\n";
    return kUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    if (!fs::exists(opt.config)) throw Failure{kMissingInput, "missing config file: " + opt.config};
    RunConfig cfg = parse_config(opt.config);
    if (opt.seed) {
      cfg.set_seed(*opt.seed);
      cfg.validate();
    }
    const fs::path dir(opt.out);
    try {
      fs::create_directories(dir);
    } catch (const fs::filesystem_error& e) {
      throw Failure{kWriteFailure, "cannot create run directory " + dir.string() + ": " + e.code().message()};
    }
    write_text(dir / "config.resolved", cfg.to_text());

    if (command == "gen-data") gen_data(cfg, dir, out);
    else if (command == "pretrain") run_pretrain_cmd(cfg, dir, out);
    else if (command == "adapt") run_adapt_cmd(cfg, dir, out);
    else if (command == "eval") run_eval_cmd(cfg, dir, out);
    else run_ablate_cmd(cfg, dir, out);
    return kOk;
  } catch (const Failure& f) {
    err << "xsf: " << command << ": " << one_line(f.message) << "\n";
    return f.code;
  } catch (const Error& e) {
    err << "xsf: " << command << ": " << one_line(e.what()) << "\n";
    return code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "xsf: " << command << ": " << one_line(e.what()) << "\n";
    return kWriteFailure;
  } catch (const std::exception& e) {
    err << "xsf: " << command << ": internal error: " << one_line(e.what()) << "\n";
    return kInternal;
  }
}

}  // namespace xsf::cli
