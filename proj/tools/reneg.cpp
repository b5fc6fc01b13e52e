// Command-line front end: data collection, labeling, training, evaluation,
// diagnostics and the session service.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "reneg/backseat.hpp"
#include "reneg/checks.hpp"
#include "reneg/dataset.hpp"
#include "reneg/demonstrators.hpp"
#include "reneg/evaluation.hpp"
#include "reneg/server.hpp"
#include "reneg/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace reneg;

namespace {

sim::TrackSpec track_from(const std::string& name) {
  if (name == "default") return sim::default_track();
  if (name == "straight") return sim::straight_track();
  return sim::load_track(name);
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  data::detail::write_atomically(path, text);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(1, path + ": " + e.what());
  }
}

std::vector<std::size_t> parse_hidden(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw InvalidArgument("--hidden expects comma-separated positive sizes, got '" + s + "'");
    }
  }
  if (out.empty()) throw InvalidArgument("--hidden is empty");
  return out;
}

std::string hidden_string(const std::vector<std::size_t>& h) {
  std::string s;
  for (std::size_t i = 0; i < h.size(); ++i) s += (i ? "," : "") + std::to_string(h[i]);
  return s;
}

// Flags shared by every command that trains.
struct TrainFlags {
  std::size_t batch = 100;
  int epochs = 5;
  double lr = 1e-6;
  std::uint64_t seed = 0;
  std::string hidden = hidden_string(nn::default_hidden());
  bool bias_free = false;
  bool no_shuffle = false;

  void add(CLI::App* app) {
    app->add_option("--batch", batch, "mini-batch size")->capture_default_str();
    app->add_option("--epochs", epochs, "training epochs")->capture_default_str();
    app->add_option("--lr", lr, "learning rate")->capture_default_str();
    app->add_option("--seed", seed, "seed for initialization and shuffling")->capture_default_str();
    app->add_option("--hidden", hidden, "hidden layer sizes")->capture_default_str();
    app->add_flag("--bias-free", bias_free, "drop biases (odd network)");
    app->add_flag("--no-shuffle", no_shuffle, "keep dataset order");
  }

  train::TrainConfig config() const {
    train::TrainConfig c;
    c.batch_size = batch;
    c.epochs = epochs;
    c.learning_rate = lr;
    c.seed = seed;
    c.hidden = parse_hidden(hidden);
    c.bias_free = bias_free;
    c.shuffle = !no_shuffle;
    return c;
  }
};

struct EvalFlags {
  int trials = 8;
  double max_time = 180.0;
  std::uint64_t seed = 0;
  std::string track = "default";
  bool mirrored = false;

  void add(CLI::App* app) {
    app->add_option("--trials", trials, "trials per evaluation")->capture_default_str();
    app->add_option("--max-time", max_time, "censoring horizon in seconds")->capture_default_str();
    app->add_option("--eval-seed", seed, "seed for start poses")->capture_default_str();
    app->add_option("--track", track, "default, straight or a track file")->capture_default_str();
    app->add_flag("--mirrored", mirrored, "evaluate on the reflected course");
  }

  eval::EvalConfig config() const {
    eval::EvalConfig c;
    c.trials = trials;
    c.max_time = max_time;
    c.seed = seed;
    c.mirrored = mirrored;
    return c;
  }
};

void save_run(const std::string& run_root, const train::TrainConfig& cfg, const train::TrainResult& r,
              const json& extra) {
  if (run_root.empty()) return;
  const fs::path dir = fs::path(run_root) / r.report.config_hash;
  fs::create_directories(dir);
  json config = train::to_json(cfg);
  config.update(extra);
  data::detail::write_atomically((dir / "config.json").string(), config.dump(2) + "\n");
  nn::save(r.params, (dir / "params.txt").string());
  data::detail::write_atomically((dir / "metrics.json").string(), r.report.to_json().dump(2) + "\n");
  data::detail::write_atomically((dir / "report.txt").string(), r.report.table());
  std::cerr << "run directory: " << dir.string() << "\n";
}

std::pair<std::string, double> parse_model(const std::string& token, double default_lr) {
  const auto at = token.find('@');
  if (at == std::string::npos) return {token, default_lr};
  try {
    return {token.substr(0, at), std::stod(token.substr(at + 1))};
  } catch (const std::exception&) {
    throw InvalidArgument("bad model spec '" + token + "', expected name or name@lr");
  }
}

std::vector<double> parse_rates(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw InvalidArgument("bad learning rate '" + tok + "'");
    }
  }
  if (out.empty()) throw InvalidArgument("no learning rates given");
  return out;
}

std::string sweep_table(const std::vector<eval::SweepPoint>& pts) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-4s %12s %10s %10s %10s %10s\n", "rank", "lr", "mean_s", "min_s", "max_s",
                "sd_s");
  os << line;
  int rank = 1;
  for (const auto& p : pts) {
    std::snprintf(line, sizeof line, "%-4d %12g %10.3f %10.3f %10.3f %10.3f\n", rank++, p.learning_rate,
                  p.summary.mean, p.summary.min_mean, p.summary.max_mean, p.summary.stddev);
    os << line;
  }
  return os.str();
}

json sweep_json(const std::vector<eval::SweepPoint>& pts) {
  json j = {{"kind", "lr_sweep"}, {"points", json::array()}};
  for (const auto& p : pts) j["points"].push_back({{"learning_rate", p.learning_rate}, {"model", p.summary.to_json()}});
  return j;
}

std::atomic<bool> g_interrupted{false};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reneg: learning to steer from scored demonstrations"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // collect
  auto* collect = app.add_subcommand("collect", "record scripted demonstrations");
  std::string regime = "all", collect_out, collect_track = "default";
  double duration = 600.0, rate = 2.0;
  std::uint64_t collect_seed = 0;
  collect->add_option("--regime", regime, "regime name, or 'all' for the default budget")->capture_default_str();
  collect->add_option("--duration", duration, "seconds (single regime)")->capture_default_str();
  collect->add_option("--rate", rate, "sampling rate in Hz")->capture_default_str();
  collect->add_option("--seed", collect_seed)->capture_default_str();
  collect->add_option("--track", collect_track)->capture_default_str();
  collect->add_option("--out", collect_out, "log file")->required();

  // label
  auto* label = app.add_subcommand("label", "turn a log into a dataset with a critic");
  std::string label_log, label_out, critic = "oracle", corrections_path;
  double epsilon = 0.1, theta_max = 50.0;
  bool strict = false;
  label->add_option("--log", label_log)->required();
  label->add_option("--out", label_out)->required();
  label->add_option("--critic", critic, "oracle or human")->capture_default_str();
  label->add_option("--corrections", corrections_path, "JSON lines of {t, c_raw, episode} (human critic)");
  label->add_option("--epsilon", epsilon, "opposite-sign tolerance on |c|")->capture_default_str();
  label->add_option("--theta-max", theta_max, "degrees at |steer| = 1")->capture_default_str();
  label->add_flag("--strict", strict, "fail if any sample has no correction");

  // augment
  auto* augment = app.add_subcommand("augment", "append mirrored copies");
  std::string aug_in, aug_out;
  augment->add_option("--in", aug_in)->required();
  augment->add_option("--out", aug_out)->required();

  // split
  auto* split = app.add_subcommand("split", "train/validation split keeping mirror pairs together");
  std::string split_in, split_train, split_val;
  double ratio = 0.85;
  std::uint64_t split_seed = 0;
  split->add_option("--in", split_in)->required();
  split->add_option("--train", split_train)->required();
  split->add_option("--val", split_val)->required();
  split->add_option("--ratio", ratio)->capture_default_str();
  split->add_option("--seed", split_seed)->capture_default_str();

  // train
  auto* trn = app.add_subcommand("train", "train a policy network");
  TrainFlags tf;
  tf.add(trn);
  std::string train_path, val_path, loss_name = "scalar", fnet_path, params_out, run_dir;
  bool threshold = false;
  std::optional<double> alpha;
  double lambda = 0.0;
  std::uint64_t init_seed = 0;
  bool init_seed_set = false;
  trn->add_option("--train", train_path)->required();
  trn->add_option("--val", val_path, "validation set (defaults to the training set)");
  trn->add_option("--loss", loss_name, "scalar, exponential, inverse, absolute, fnet, mse-positive")
      ->capture_default_str();
  trn->add_flag("--threshold", threshold, "replace f by sign(f)");
  trn->add_option("--alpha", alpha, "negative feedback scale (default 1, exponential 0.1)");
  trn->add_option("--lambda", lambda, "continuity penalty weight")->capture_default_str();
  trn->add_option("--fnet", fnet_path, "feedback network params (fnet loss)");
  auto* init_opt = trn->add_option("--init-seed", init_seed, "weight initialization seed (defaults to --seed)");
  trn->add_option("--out", params_out, "params file");
  trn->add_option("--run-dir", run_dir, "write <run-dir>/<config hash>/ with params and metrics");

  // train-fnet
  auto* trnf = app.add_subcommand("train-fnet", "train a feedback network");
  TrainFlags ff;
  ff.add(trnf);
  std::string fnet_train, fnet_val, fnet_out, fnet_run_dir;
  trnf->add_option("--train", fnet_train)->required();
  trnf->add_option("--val", fnet_val);
  trnf->add_option("--out", fnet_out);
  trnf->add_option("--run-dir", fnet_run_dir);

  // eval
  auto* ev = app.add_subcommand("eval", "closed-loop time lasted");
  EvalFlags ef;
  ef.add(ev);
  std::string eval_params, eval_json;
  bool fnet_policy = false;
  ev->add_option("--params", eval_params)->required();
  ev->add_flag("--fnet-policy", fnet_policy, "params are a feedback network; steer by its argmax");
  ev->add_option("--json", eval_json, "write the result as JSON");

  // compare
  auto* cmp = app.add_subcommand("compare", "train and evaluate several recipes");
  TrainFlags cf;
  cf.add(cmp);
  EvalFlags cef;
  cef.add(cmp);
  std::string cmp_train, cmp_val, cmp_json;
  std::vector<std::string> models{"scalar", "bc"};
  int runs = 3;
  cmp->add_option("--train", cmp_train)->required();
  cmp->add_option("--val", cmp_val);
  cmp->add_option("--models", models, "presets, optionally name@lr")->delimiter(',')->capture_default_str();
  cmp->add_option("--runs", runs)->capture_default_str();
  cmp->add_option("--json", cmp_json, "write the report as JSON");

  // sweep-lr
  auto* sweep = app.add_subcommand("sweep-lr", "rank learning rates for one recipe");
  TrainFlags sf;
  sf.add(sweep);
  EvalFlags sef;
  sef.add(sweep);
  std::string sw_train, sw_val, sw_json, sw_model = "scalar", sw_rates = "1e-6,5e-6,1e-5,1.5e-5,2e-5";
  int sw_runs = 1;
  sweep->add_option("--train", sw_train)->required();
  sweep->add_option("--val", sw_val);
  sweep->add_option("--model", sw_model)->capture_default_str();
  sweep->add_option("--rates", sw_rates)->capture_default_str();
  sweep->add_option("--runs", sw_runs)->capture_default_str();
  sweep->add_option("--json", sw_json);

  // check-grads
  auto* cg = app.add_subcommand("check-grads", "finite-difference check of loss gradients through a network");
  std::string cg_loss = "all";
  std::size_t cg_configs = 100;
  std::uint64_t cg_seed = 0;
  double cg_tol = 1e-4;
  cg->add_option("--loss", cg_loss)->capture_default_str();
  cg->add_option("--configs", cg_configs)->capture_default_str();
  cg->add_option("--seed", cg_seed)->capture_default_str();
  cg->add_option("--tolerance", cg_tol)->capture_default_str();

  // check-properties
  auto* cp = app.add_subcommand("check-properties", "tabulate the four loss properties on a grid");
  std::string cp_loss = "all", cp_json;
  cp->add_option("--loss", cp_loss)->capture_default_str();
  cp->add_option("--json", cp_json);

  // serve
  auto* srv = app.add_subcommand("serve", "run the session service");
  std::uint16_t port = 8765;
  std::string bind = "127.0.0.1", data_dir = ".";
  srv->add_option("--port", port)->capture_default_str();
  srv->add_option("--bind", bind)->capture_default_str();
  srv->add_option("--data-dir", data_dir)->capture_default_str();

  // report
  auto* rep = app.add_subcommand("report", "render a saved comparison or sweep as a table");
  std::string rep_in;
  rep->add_option("--in", rep_in)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: UsageError: " << e.what() << "\n";
    return 64;
  }
  init_seed_set = init_opt->count() > 0;

  try {
    if (*collect) {
      const auto track = track_from(collect_track);
      demo::DemoLog log;
      if (regime == "all") {
        log = demo::collect(track, demo::default_budget(), rate, collect_seed);
      } else {
        demo::RecordOptions opt;
        opt.regime = demo::regime_from_string(regime);
        if (opt.regime == demo::Regime::human) throw InvalidArgument("the human regime cannot be scripted");
        log = demo::record(demo::make_policy(opt.regime), track, duration, rate, collect_seed, opt);
      }
      data::save(log, collect_out);
      std::cout << "wrote " << log.entries.size() << " entries to " << collect_out << "\n";
    } else if (*label) {
      const auto log = data::load_log(label_log);
      backseat::FeedbackParams p;
      p.theta_max_deg = theta_max;
      p.epsilon = epsilon;
      backseat::LabelResult r;
      if (critic == "oracle") {
        r = backseat::label_with_oracle(log, p);
      } else if (critic == "human") {
        if (corrections_path.empty()) throw InvalidArgument("--critic human needs --corrections");
        std::ifstream in(corrections_path);
        if (!in) throw IoError("cannot open " + corrections_path);
        std::vector<backseat::Correction> cs;
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
          ++n;
          if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
          try {
            const auto j = json::parse(line);
            cs.push_back({j.at("c_raw").get<double>(), backseat::CorrectionSource::human, j.at("t").get<double>(),
                          j.value("episode", std::int64_t{0})});
          } catch (const json::exception& e) {
            throw FormatError(n, e.what());
          }
        }
        r = backseat::label_with_corrections(log, cs, p, strict);
      } else {
        throw InvalidArgument("unknown critic '" + critic + "'");
      }
      data::save(r.dataset, label_out);
      std::cout << "labeled " << r.dataset.size() << " samples (" << r.dropped << " dropped) into " << label_out
                << "\n";
    } else if (*augment) {
      const auto ds = data::augment_mirror(data::load(aug_in));
      data::save(ds, aug_out);
      std::cout << "wrote " << ds.size() << " samples to " << aug_out << "\n";
    } else if (*split) {
      const auto [a, b] = data::split(data::load(split_in), ratio, split_seed);
      data::save(a, split_train);
      data::save(b, split_val);
      std::cout << "train " << a.size() << ", validation " << b.size() << "\n";
    } else if (*trn) {
      auto cfg = tf.config();
      cfg.loss.kind = loss::loss_kind_from_string(loss_name);
      cfg.loss.threshold = threshold;
      cfg.loss.alpha = alpha ? *alpha : (cfg.loss.kind == loss::LossKind::exponential ? 0.1 : 1.0);
      cfg.loss.continuity_lambda = lambda;
      const auto train_set = data::load(train_path);
      const auto val_set = val_path.empty() ? train_set : data::load(val_path);
      std::optional<nn::Mlp> fnet;
      if (!fnet_path.empty()) fnet = nn::load(fnet_path);
      const std::uint64_t iseed = init_seed_set ? init_seed : cfg.seed;
      const auto r = train::train_policy(train_set, val_set, cfg, iseed, fnet ? &*fnet : nullptr);
      if (!params_out.empty()) nn::save(r.params, params_out);
      save_run(run_dir, cfg, r, {{"init_seed", iseed}, {"train", train_path}, {"val", val_path}});
      std::cout << r.report.table();
    } else if (*trnf) {
      const auto cfg = ff.config();
      const auto train_set = data::load(fnet_train);
      const auto val_set = fnet_val.empty() ? train_set : data::load(fnet_val);
      const auto r = train::train_fnet(train_set, val_set, cfg, cfg.seed);
      if (!fnet_out.empty()) nn::save(r.params, fnet_out);
      save_run(fnet_run_dir, cfg, r, {{"net", "fnet"}, {"train", fnet_train}});
      std::cout << r.report.table();
    } else if (*ev) {
      const auto net = nn::load(eval_params);
      if (fnet_policy != (net.kind() == nn::NetKind::fnet)) {
        throw InvalidArgument(fnet_policy ? "--fnet-policy needs feedback network params"
                                          : "params are a feedback network; pass --fnet-policy");
      }
      const auto policy = fnet_policy ? eval::fnet_policy(net) : eval::pnet_policy(net);
      const auto r = eval::evaluate(policy, track_from(ef.track), ef.config(), eval_params);
      char line[160];
      for (std::size_t i = 0; i < r.times.size(); ++i) {
        std::snprintf(line, sizeof line, "trial %zu: %.3f s%s\n", i, r.times[i], r.censored[i] ? " (censored)" : "");
        std::cout << line;
      }
      std::snprintf(line, sizeof line, "mean %.3f s  sd %.3f  min %.3f  max %.3f\n", r.mean, r.stddev, r.min, r.max);
      std::cout << line;
      if (!eval_json.empty()) write_text(eval_json, r.to_json().dump(2) + "\n");
    } else if (*cmp) {
      const auto base = cf.config();
      std::vector<eval::ModelSpec> specs;
      for (const auto& m : models) {
        const auto [name, lr] = parse_model(m, base.learning_rate);
        auto spec = eval::model_preset(name, base);
        spec.train.learning_rate = lr;
        if (m.find('@') != std::string::npos) spec.name = m;
        specs.push_back(spec);
      }
      eval::CompareConfig cc;
      cc.runs = runs;
      cc.seed = base.seed;
      cc.eval = cef.config();
      cc.fnet_train = base;
      const auto train_set = data::load(cmp_train);
      const auto val_set = cmp_val.empty() ? train_set : data::load(cmp_val);
      const auto report = eval::compare(specs, train_set, val_set, track_from(cef.track), cc);
      std::cout << report.table();
      if (!cmp_json.empty()) write_text(cmp_json, report.to_json().dump(2) + "\n");
    } else if (*sweep) {
      const auto base = sf.config();
      eval::CompareConfig cc;
      cc.runs = sw_runs;
      cc.seed = base.seed;
      cc.eval = sef.config();
      cc.fnet_train = base;
      const auto train_set = data::load(sw_train);
      const auto val_set = sw_val.empty() ? train_set : data::load(sw_val);
      const auto pts = eval::lr_sweep(eval::model_preset(sw_model, base), parse_rates(sw_rates), train_set, val_set,
                                      track_from(sef.track), cc);
      std::cout << sweep_table(pts);
      if (!sw_json.empty()) write_text(sw_json, sweep_json(pts).dump(2) + "\n");
    } else if (*cg) {
      std::vector<loss::LossKind> kinds;
      if (cg_loss == "all") {
        kinds = {loss::LossKind::scalar, loss::LossKind::exponential, loss::LossKind::inverse,
                 loss::LossKind::absolute, loss::LossKind::fnet};
      } else {
        kinds = {loss::loss_kind_from_string(cg_loss)};
      }
      bool ok = true;
      for (auto k : kinds) {
        const auto r = checks::gradient_check(k, cg_configs, cg_seed);
        const bool pass = r.max_rel_error < cg_tol;
        ok = ok && pass;
        std::printf("%-14s configs %zu  max relative error %.3e  %s\n", std::string(loss::to_string(k)).c_str(),
                    r.configs, r.max_rel_error, pass ? "ok" : "FAIL");
      }
      return ok ? 0 : 1;
    } else if (*cp) {
      std::vector<loss::LossKind> kinds;
      if (cp_loss == "all") {
        kinds = {loss::LossKind::scalar, loss::LossKind::exponential, loss::LossKind::inverse,
                 loss::LossKind::absolute};
      } else {
        kinds = {loss::loss_kind_from_string(cp_loss)};
      }
      json all = json::array();
      for (auto k : kinds) {
        const auto r = loss::check_properties(k, loss::PropertyGrid::standard());
        std::cout << r.table() << "\n";
        all.push_back(r.to_json());
      }
      if (!cp_json.empty()) write_text(cp_json, all.dump(2) + "\n");
    } else if (*srv) {
      session::ServiceConfig svc;
      svc.data_dir = data_dir;
      fs::create_directories(data_dir);
      server::Server server(svc, port, bind);
      server.start();
      std::cout << "listening on " << bind << ":" << server.port() << " (data in " << data_dir << ")" << std::endl;
      std::signal(SIGINT, [](int) { g_interrupted = true; });
      std::signal(SIGTERM, [](int) { g_interrupted = true; });
      while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
    } else if (*rep) {
      const auto j = read_json(rep_in);
      if (j.value("kind", "") == "lr_sweep") {
        std::vector<eval::SweepPoint> pts;
        for (const auto& p : j.at("points")) {
          eval::SweepPoint sp;
          sp.learning_rate = p.at("learning_rate").get<double>();
          const auto& m = p.at("model");
          sp.summary.name = m.at("name").get<std::string>();
          sp.summary.mean = m.at("mean").get<double>();
          sp.summary.min_mean = m.at("min_mean").get<double>();
          sp.summary.max_mean = m.at("max_mean").get<double>();
          sp.summary.stddev = m.at("stddev").get<double>();
          pts.push_back(sp);
        }
        std::cout << sweep_table(pts);
      } else if (j.contains("models")) {
        eval::ComparisonReport r;
        r.config.runs = j.value("runs", 0);
        r.config.eval.trials = j.value("trials", 0);
        for (const auto& m : j.at("models")) {
          eval::ModelSummary s;
          s.name = m.at("name").get<std::string>();
          s.mean = m.at("mean").get<double>();
          s.min_mean = m.at("min_mean").get<double>();
          s.max_mean = m.at("max_mean").get<double>();
          s.stddev = m.at("stddev").get<double>();
          for (const auto& run : m.at("runs")) {
            eval::EvalResult er;
            er.times = run.at("times").get<std::vector<double>>();
            er.censored = run.at("censored").get<std::vector<bool>>();
            s.runs.push_back(er);
          }
          r.models.push_back(s);
        }
        std::cout << r.table();
      } else {
        throw FormatError(1, rep_in + " is neither a comparison nor a sweep report");
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: FormatError: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: InternalError: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
