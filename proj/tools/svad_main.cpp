// Command-line pipeline: corpus generation, training, scoring, evaluation,
// expert inspection, and ablation sweeps.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "svad/checkpoint.hpp"
#include "svad/config.hpp"
#include "svad/corpus.hpp"
#include "svad/model.hpp"
#include "svad/scoring.hpp"
#include "svad/trainer.hpp"

namespace {

using namespace svad;

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Shared helpers.
// ---------------------------------------------------------------------------

RunConfig assemble_config(const std::string& config_path, const std::vector<std::string>& sets) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot open config file: " + config_path);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  for (const std::string& s : sets) apply_config_override(j, s);
  RunConfig rc = run_config_from_json(j);
  validate_run_config(rc);
  return rc;
}

struct LoadedModel {
  RunConfig rc;
  uint64_t fingerprint = 0;
  std::shared_ptr<Model> model;
};

LoadedModel load_model_from_checkpoint(const std::string& path, const Corpus& corpus) {
  Checkpoint ck = load_checkpoint(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ck.config_json);
  } catch (const nlohmann::json::exception&) {
    throw IoError("checkpoint carries malformed config JSON");
  }
  LoadedModel lm;
  lm.rc = run_config_from_json(j);
  lm.fingerprint = ck.fingerprint;
  ModelConfig mcfg = model_config_from(lm.rc, corpus.height, corpus.width);
  lm.model = std::make_shared<Model>(make_model<float>(mcfg, lm.rc.seed));
  std::vector<size_t> sizes;
  visit_params(*lm.model, [&](const std::string&, Tensor& t) { sizes.push_back(t.numel()); });
  AdamState scratch = make_adam_state(sizes);
  restore(*lm.model, scratch, ck);
  return lm;
}

void write_scores_csv(const std::string& path, const std::vector<ScoreSeries>& series,
                      uint64_t fingerprint) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open scores CSV for writing: " + path);
  out << "# config_fingerprint=" << fingerprint_hex(fingerprint) << "\n";
  out << "video_id,frame,S_v,S_t,S,label\n";
  for (const auto& sr : series)
    for (size_t i = 0; i < sr.s.size(); ++i)
      out << sr.video_id << ',' << i << ',' << fmt9(sr.s_v[i]) << ',' << fmt9(sr.s_t[i]) << ','
          << fmt9(sr.s[i]) << ',' << sr.labels[i] << "\n";
  if (!out) throw IoError("short write: " + path);
}

struct ParsedScores {
  std::vector<ScoreSeries> series;
  std::string fingerprint_hex;
};

ParsedScores read_scores_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scores CSV: " + path);
  ParsedScores out;
  std::map<std::string, size_t> index;
  std::string line;
  bool saw_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string tag = "config_fingerprint=";
      const size_t p = line.find(tag);
      if (p != std::string::npos) out.fingerprint_hex = line.substr(p + tag.size());
      continue;
    }
    if (!saw_header) {  // column header
      saw_header = true;
      continue;
    }
    std::stringstream ss(line);
    std::string video_id, frame_s, sv_s, st_s, s_s, lab_s;
    if (!std::getline(ss, video_id, ',') || !std::getline(ss, frame_s, ',') ||
        !std::getline(ss, sv_s, ',') || !std::getline(ss, st_s, ',') ||
        !std::getline(ss, s_s, ',') || !std::getline(ss, lab_s))
      throw ValidationError("malformed scores CSV row: " + line);
    size_t vi;
    auto it = index.find(video_id);
    if (it == index.end()) {
      vi = out.series.size();
      index[video_id] = vi;
      out.series.emplace_back();
      out.series.back().video_id = video_id;
    } else {
      vi = it->second;
    }
    try {
      out.series[vi].s_v.push_back(std::stod(sv_s));
      out.series[vi].s_t.push_back(std::stod(st_s));
      out.series[vi].s.push_back(std::stod(s_s));
      out.series[vi].labels.push_back(std::stoi(lab_s));
    } catch (const std::exception&) {
      throw ValidationError("malformed scores CSV row: " + line);
    }
  }
  if (out.series.empty()) throw ValidationError("scores CSV has no data rows: " + path);
  return out;
}

// Per-video score curves with shaded ground-truth anomaly spans.
void write_score_svg(const std::string& path, const std::vector<ScoreSeries>& series) {
  const double W = 900, band = 110, gap = 26, left = 70, right = 20;
  const double H = series.size() * (band + gap) + gap;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open SVG for writing: " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (size_t v = 0; v < series.size(); ++v) {
    const ScoreSeries& sr = series[v];
    const double top = gap + v * (band + gap);
    const size_t n = sr.s.size();
    const double xs = (W - left - right) / std::max<double>(1.0, double(n - 1));
    double lo = sr.s[0], hi = sr.s[0];
    for (double x : sr.s) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    if (hi <= lo) hi = lo + 1.0;
    auto X = [&](size_t i) { return left + xs * double(i); };
    auto Y = [&](double s) { return top + band - band * (s - lo) / (hi - lo); };
    // shaded anomaly spans
    size_t i = 0;
    while (i < n) {
      if (sr.labels[i] == 1) {
        size_t j = i;
        while (j < n && sr.labels[j] == 1) ++j;
        out << "<rect x=\"" << X(i) << "\" y=\"" << top << "\" width=\"" << (X(j - 1) - X(i))
            << "\" height=\"" << band << "\" fill=\"#fbb\" opacity=\"0.6\"/>\n";
        i = j;
      } else {
        ++i;
      }
    }
    out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << (W - left - right)
        << "\" height=\"" << band << "\" fill=\"none\" stroke=\"#999\"/>\n";
    out << "<text x=\"8\" y=\"" << (top + band / 2) << "\">" << sr.video_id << "</text>\n";
    out << "<polyline fill=\"none\" stroke=\"#2255cc\" stroke-width=\"1.5\" points=\"";
    for (size_t k = 0; k < n; ++k) out << X(k) << ',' << Y(sr.s[k]) << ' ';
    out << "\"/>\n";
  }
  out << "</svg>\n";
  if (!out) throw IoError("short write: " + path);
}

void ensure_parent_dir(const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path p(path);
  if (p.has_parent_path() && !p.parent_path().empty()) fs::create_directories(p.parent_path());
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

int cmd_gen_corpus(const GenOptions& opts, const std::string& out_dir, bool force) {
  GeneratedCorpus corpus = generate_corpus(opts);
  write_corpus(out_dir, corpus, force);
  std::cout << "wrote " << corpus.train.size() << " train + " << corpus.test.size()
            << " test videos to " << out_dir << "\n";
  return 0;
}

int run_training(const RunConfig& rc, const Corpus& corpus, const std::string& ckpt_out,
                 const std::string& loss_csv, bool resume, size_t threads, bool quiet = false) {
  const uint64_t fp = config_fingerprint(rc);
  const std::string cfg_json = canonical_config_json(rc);
  ModelConfig mcfg = model_config_from(rc, corpus.height, corpus.width);
  TrainParams tp = train_params_from(rc, threads);

  std::optional<Checkpoint> resume_from;
  if (resume) {
    Checkpoint ck = load_checkpoint(ckpt_out);
    if (ck.fingerprint != fp)
      throw ValidationError("resume checkpoint fingerprint " + fingerprint_hex(ck.fingerprint) +
                            " does not match config fingerprint " + fingerprint_hex(fp));
    resume_from = std::move(ck);
  }

  ensure_parent_dir(ckpt_out);
  ensure_parent_dir(loss_csv);
  std::ofstream csv;
  if (resume_from) {
    csv.open(loss_csv, std::ios::app);
  } else {
    csv.open(loss_csv, std::ios::trunc);
    csv << "epoch,step,pred,sim,motion,balance,total\n";
  }
  if (!csv) throw IoError("cannot open loss CSV for writing: " + loss_csv);

  TrainHooks hooks;
  hooks.on_step = [&](const LossRow& r) {
    csv << r.epoch << ',' << r.step << ',' << fmt9(r.pred) << ',' << fmt9(r.sim) << ','
        << fmt9(r.motion) << ',' << fmt9(r.balance) << ',' << fmt9(r.total) << "\n";
  };
  hooks.on_epoch_end = [&](Model& m, const AdamState& adam, uint32_t epoch, uint64_t step,
                           const std::string& rng_state) {
    csv.flush();
    save_checkpoint(ckpt_out, snapshot(m, adam, fp, cfg_json, epoch, step, rng_state));
    if (!quiet) std::cout << "epoch " << epoch << "/" << tp.epochs << " done (step " << step << ")\n";
  };

  train_model(corpus, mcfg, tp, resume_from, hooks);
  if (!quiet) std::cout << "checkpoint: " << ckpt_out << " fingerprint " << fingerprint_hex(fp) << "\n";
  return 0;
}

const std::vector<CorpusVideo>& pick_split(const Corpus& corpus, const std::string& split) {
  if (split == "test") return corpus.test;
  if (split == "train") return corpus.train;
  throw ValidationError("split must be train|test");
}

int cmd_score(const std::string& ckpt, const std::string& corpus_dir, const std::string& split,
              const std::string& out_csv, const std::string& svg_path,
              const std::string& error_map_dir, size_t threads) {
  Corpus corpus = load_corpus(corpus_dir);
  LoadedModel lm = load_model_from_checkpoint(ckpt, corpus);
  ScoringParams sp = scoring_params_from(lm.rc);
  sp.validate();

  Corpus view;
  view.height = corpus.height;
  view.width = corpus.width;
  view.test = pick_split(corpus, split);
  std::vector<ScoreSeries> series = score_corpus(*lm.model, view, sp, threads);

  ensure_parent_dir(out_csv);
  write_scores_csv(out_csv, series, lm.fingerprint);
  std::cout << "scores: " << out_csv << "\n";
  if (!svg_path.empty()) {
    ensure_parent_dir(svg_path);
    write_score_svg(svg_path, series);
    std::cout << "svg: " << svg_path << "\n";
  }
  if (!error_map_dir.empty()) {
    if (!lm.rc.branches.vision)
      throw ValidationError("error maps require the vision branch");
    std::filesystem::create_directories(error_map_dir);
    for (const auto& video : view.test) {
      VideoScoreOutputs vo = score_video(*lm.model, video, sp, true);
      const std::string p =
          (std::filesystem::path(error_map_dir) / (video.id + ".errmap.sfnf")).string();
      save_sfnf_file(p, *vo.error_maps);
    }
    std::cout << "error maps: " << error_map_dir << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& scores_csv, const std::string& out_json) {
  ParsedScores ps = read_scores_csv(scores_csv);
  EvalReport rep = evaluate_scores(ps.series);
  nlohmann::json j;
  j["auc_micro"] = rep.auc_micro;
  j["auc_per_video"] = rep.auc_per_video;
  j["config_fingerprint"] = ps.fingerprint_hex;
  nlohmann::json per;
  for (const auto& [id, auc] : rep.per_video) per[id] = auc;
  j["per_video"] = per;
  const std::string text = j.dump(2) + "\n";
  if (!out_json.empty()) {
    ensure_parent_dir(out_json);
    std::ofstream out(out_json, std::ios::trunc);
    if (!out) throw IoError("cannot open report for writing: " + out_json);
    out << text;
  }
  std::cout << text;
  return 0;
}

int cmd_inspect_experts(const std::string& ckpt, const std::string& corpus_dir,
                        const std::string& split, const std::string& out_csv, size_t threads) {
  Corpus corpus = load_corpus(corpus_dir);
  LoadedModel lm = load_model_from_checkpoint(ckpt, corpus);
  Corpus view;
  view.height = corpus.height;
  view.width = corpus.width;
  view.test = pick_split(corpus, split);
  std::vector<ExpertUsageRow> rows = expert_usage(*lm.model, view, threads);
  ensure_parent_dir(out_csv);
  std::ofstream out(out_csv, std::ios::trunc);
  if (!out) throw IoError("cannot open CSV for writing: " + out_csv);
  out << "# config_fingerprint=" << fingerprint_hex(lm.fingerprint) << "\n";
  out << "layer,expert_index,selection_fraction,mean_score\n";
  for (const auto& r : rows)
    out << r.layer << ',' << r.expert_index << ',' << fmt9(r.selection_fraction) << ','
        << fmt9(r.mean_score) << "\n";
  std::cout << "expert usage: " << out_csv << "\n";
  return 0;
}

struct AblateRow {
  std::string name;
  RunConfig rc;
};

std::vector<AblateRow> build_grid(const std::string& grid, const RunConfig& base) {
  std::vector<AblateRow> rows;
  auto push = [&](const std::string& name, RunConfig rc) { rows.push_back({name, std::move(rc)}); };
  if (grid == "branches") {
    auto with = [&](bool v, bool s, bool m) {
      RunConfig rc = base;
      rc.branches = {v, s, m};
      return rc;
    };
    push("vision", with(true, false, false));
    push("semantic", with(false, true, false));
    push("vision+semantic", with(true, true, false));
    push("vision+motion", with(true, false, true));
    push("vision+semantic+motion", with(true, true, true));
  } else if (grid == "moe") {
    auto part = [&](size_t n, size_t ks, size_t ka) {
      RunConfig rc = base;
      rc.n_experts = n;
      rc.k_shared = ks;
      rc.k_active = ka;
      return rc;
    };
    push("moe_7of63_plus1", part(64, 1, 8));
    push("moe_3of31_plus1", part(32, 1, 4));
    push("moe_1of15_plus1", part(16, 1, 2));
    push("moe_2of16_plus0", part(16, 0, 2));
    RunConfig none = base;
    none.sffm_mode = SffmMode::None;
    push("moe_none", none);
  } else if (grid == "losses") {
    push("all_losses", base);
    RunConfig n1 = base;
    n1.lambda_sim = 0;
    push("no_sim", n1);
    RunConfig n2 = base;
    n2.lambda_motion = 0;
    push("no_motion", n2);
    RunConfig n3 = base;
    n3.alpha = 0;
    push("no_balance", n3);
  } else if (grid == "memory") {
    RunConfig a = base;
    a.sffm_mode = SffmMode::Sffm;
    push("sffm", a);
    RunConfig b = base;
    b.sffm_mode = SffmMode::Memory;
    push("memory", b);
    RunConfig c = base;
    c.sffm_mode = SffmMode::None;
    push("none", c);
  } else {
    throw ValidationError("grid must be one of branches|moe|losses|memory");
  }
  return rows;
}

int cmd_ablate(const RunConfig& base, const std::string& corpus_dir, const std::string& grid,
               const std::string& out_csv, size_t threads) {
  Corpus corpus = load_corpus(corpus_dir);
  std::vector<AblateRow> rows = build_grid(grid, base);
  ensure_parent_dir(out_csv);
  const std::filesystem::path workdir = std::filesystem::path(out_csv).parent_path();
  std::ofstream out(out_csv, std::ios::trunc);
  if (!out) throw IoError("cannot open CSV for writing: " + out_csv);
  out << "name,auc_micro,auc_per_video,config_fingerprint\n";
  for (const auto& row : rows) {
    validate_run_config(row.rc);
    const std::string ckpt = (workdir / (row.name + ".ckpt")).string();
    const std::string loss_csv = (workdir / (row.name + ".loss.csv")).string();
    const std::string scores_csv = (workdir / (row.name + ".scores.csv")).string();
    std::cout << "[" << grid << "] " << row.name << "...\n";
    run_training(row.rc, corpus, ckpt, loss_csv, false, threads, true);

    Corpus view;
    view.height = corpus.height;
    view.width = corpus.width;
    view.test = corpus.test;
    LoadedModel lm = load_model_from_checkpoint(ckpt, corpus);
    std::vector<ScoreSeries> series =
        score_corpus(*lm.model, view, scoring_params_from(row.rc), threads);
    write_scores_csv(scores_csv, series, lm.fingerprint);
    EvalReport rep = evaluate_scores(series);
    out << row.name << ',' << fmt9(rep.auc_micro) << ',' << fmt9(rep.auc_per_video) << ','
        << fingerprint_hex(lm.fingerprint) << "\n";
    out.flush();
  }
  std::cout << "ablation table: " << out_csv << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Argument wiring.
// ---------------------------------------------------------------------------

int run_cli(int argc, char** argv) {
  CLI::App app{"Prediction-based video anomaly detection with sparse bottleneck-filter experts"};
  app.require_subcommand(1);

  // gen-corpus
  GenOptions gen_opts;
  std::string gen_out;
  bool gen_force = false;
  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic moving-shape corpus");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_opts.seed, "Corpus seed (default 7)");
  gen->add_option("--train-videos", gen_opts.train_videos, "Train video count (default 64)");
  gen->add_option("--test-videos", gen_opts.test_videos, "Test video count (default 16)");
  gen->add_option("--frames", gen_opts.frames, "Frames per video (default 120)");
  gen->add_option("--flip-fraction", gen_opts.flip_fraction,
                  "Share of test videos with semantic-flip anomalies (default 0.25)");
  gen->add_flag("--force", gen_force, "Overwrite a non-empty output directory");

  // shared config options for train/ablate
  std::string config_path;
  std::vector<std::string> sets;
  size_t threads = 1;

  // train
  std::string train_corpus, train_out, train_loss_csv;
  bool train_resume = false;
  std::optional<size_t> f_epochs, f_batch;
  std::optional<uint64_t> f_seed;
  std::optional<double> f_lr;
  auto* train = app.add_subcommand("train", "Train on the normal-only split of a corpus");
  train->add_option("--config", config_path, "Run-config JSON (defaults used when omitted)");
  train->add_option("--set", sets, "Override config keys, e.g. --set branches.semantic=false");
  train->add_option("--corpus", train_corpus, "Corpus directory")->required();
  train->add_option("--out", train_out, "Checkpoint output path")->required();
  train->add_option("--loss-csv", train_loss_csv, "Loss log path (default <out>.loss.csv)");
  train->add_option("--epochs", f_epochs, "Override epochs");
  train->add_option("--batch", f_batch, "Override batch size");
  train->add_option("--seed", f_seed, "Override seed");
  train->add_option("--lr", f_lr, "Override learning rate");
  train->add_option("--threads", threads, "Worker threads (results are thread-count invariant)");
  train->add_flag("--resume", train_resume, "Resume from the checkpoint at --out");

  // score
  std::string sc_ckpt, sc_corpus, sc_split = "test", sc_out, sc_svg, sc_errmaps;
  auto* score = app.add_subcommand("score", "Score a corpus split with a trained checkpoint");
  score->add_option("--checkpoint", sc_ckpt, "Checkpoint path")->required();
  score->add_option("--corpus", sc_corpus, "Corpus directory")->required();
  score->add_option("--split", sc_split, "Corpus split: test|train (default test)");
  score->add_option("--out", sc_out, "Scores CSV output path")->required();
  score->add_option("--svg", sc_svg, "Also write per-video score curves as SVG");
  score->add_option("--error-maps", sc_errmaps, "Also export per-video squared-error maps here");
  score->add_option("--threads", threads, "Worker threads");

  // eval
  std::string ev_scores, ev_out;
  auto* eval = app.add_subcommand("eval", "Frame-level ROC-AUC report from a scores CSV");
  eval->add_option("--scores", ev_scores, "Scores CSV path")->required();
  eval->add_option("--out", ev_out, "Report JSON output path (default: stdout only)");

  // inspect-experts
  std::string ie_ckpt, ie_corpus, ie_split = "test", ie_out;
  auto* inspect = app.add_subcommand("inspect-experts", "Expert selection fractions and scores");
  inspect->add_option("--checkpoint", ie_ckpt, "Checkpoint path")->required();
  inspect->add_option("--corpus", ie_corpus, "Corpus directory")->required();
  inspect->add_option("--split", ie_split, "Corpus split: test|train (default test)");
  inspect->add_option("--out", ie_out, "Utilization CSV output path")->required();
  inspect->add_option("--threads", threads, "Worker threads");

  // ablate
  std::string ab_corpus, ab_grid, ab_out;
  auto* ablate = app.add_subcommand("ablate", "Train/score/eval a sweep and tabulate AUCs");
  ablate->add_option("--config", config_path, "Base run-config JSON");
  ablate->add_option("--set", sets, "Override base config keys");
  ablate->add_option("--corpus", ab_corpus, "Corpus directory")->required();
  ablate->add_option("--grid", ab_grid, "Sweep: branches|moe|losses|memory")->required();
  ablate->add_option("--out", ab_out, "Table CSV output path")->required();
  ablate->add_option("--threads", threads, "Worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help text, exit code 0
  } catch (const CLI::ParseError& e) {
    throw ValidationError(std::string(e.what()));
  }

  if (gen->parsed()) return cmd_gen_corpus(gen_opts, gen_out, gen_force);
  if (train->parsed()) {
    RunConfig rc = assemble_config(config_path, sets);
    if (f_epochs) rc.epochs = *f_epochs;
    if (f_batch) rc.batch = *f_batch;
    if (f_seed) rc.seed = *f_seed;
    if (f_lr) rc.lr = *f_lr;
    validate_run_config(rc);
    Corpus corpus = load_corpus(train_corpus);
    if (train_loss_csv.empty()) train_loss_csv = train_out + ".loss.csv";
    return run_training(rc, corpus, train_out, train_loss_csv, train_resume, threads);
  }
  if (score->parsed())
    return cmd_score(sc_ckpt, sc_corpus, sc_split, sc_out, sc_svg, sc_errmaps, threads);
  if (eval->parsed()) return cmd_eval(ev_scores, ev_out);
  if (inspect->parsed()) return cmd_inspect_experts(ie_ckpt, ie_corpus, ie_split, ie_out, threads);
  if (ablate->parsed()) {
    RunConfig rc = assemble_config(config_path, sets);
    return cmd_ablate(rc, ab_corpus, ab_grid, ab_out, threads);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const svad::ValidationError& e) {
    std::cerr << "ERROR 2: " << e.what() << "\n";
    return 2;
  } catch (const svad::IoError& e) {
    std::cerr << "ERROR 3: " << e.what() << "\n";
    return 3;
  } catch (const svad::NumericError& e) {
    std::cerr << "ERROR 4: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "ERROR 2: " << e.what() << "\n";
    return 2;
  }
}
