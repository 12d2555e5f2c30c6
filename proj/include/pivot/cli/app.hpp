#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "pivot/align/align.hpp"
#include "pivot/config.hpp"
#include "pivot/corpus/io.hpp"
#include "pivot/corpus/world.hpp"
#include "pivot/errors.hpp"
#include "pivot/eval/cluster.hpp"
#include "pivot/eval/crossmodal.hpp"
#include "pivot/eval/probe.hpp"
#include "pivot/eval/report.hpp"
#include "pivot/eval/sentence.hpp"
#include "pivot/eval/word.hpp"
#include "pivot/log.hpp"
#include "pivot/model/model.hpp"
#include "pivot/tokenizer/bpe.hpp"
#include "pivot/trainer/trainer.hpp"

namespace pivot::cli {

namespace fs = std::filesystem;

/// Arguments shared by every subcommand plus the per-command inputs.
struct Options {
  std::string config_path;
  std::string run_dir;
  std::string out_root = "runs";
  std::size_t threads = 1;
  std::string log_level = "warn";

  std::string world, vocab, model, gt, maps;
  std::string split = "test";
  std::string lang;
  bool all_languages = false;
  bool check_truth = false;
  bool no_lt = false, no_lv = false, no_lx = false, no_lc = false, supervised_alpha = false;
  std::vector<std::string> inputs;
};

struct Run {
  std::string command;
  RunConfig cfg;
  fs::path dir;
  std::ostream* out = &std::cout;
};

namespace detail {

inline void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::string>& lines) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) flatten(v, key, lines);
    else lines.push_back("  " + key + " = " + v.dump());
  }
}

inline std::string config_key_listing() {
  std::vector<std::string> lines;
  flatten(to_json(RunConfig{}), "", lines);
  std::string s = "Config keys (JSON file sections, or --section.key=value overrides):\n";
  for (const auto& l : lines) s += l + "\n";
  return s;
}

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// An explicit directory must be new or empty; generated names get a numeric suffix on collision.
inline fs::path make_run_dir(const Options& o, const std::string& command, const std::string& hash) {
  if (!o.run_dir.empty()) {
    const fs::path p = o.run_dir;
    if (fs::exists(p) && !(fs::is_directory(p) && fs::is_empty(p))) {
      throw UsageError("run directory '" + p.string() + "' already exists and is not empty");
    }
    fs::create_directories(p);
    return p;
  }
  const std::string stem = command + "-" + timestamp() + "-" + hash.substr(0, 8);
  fs::path p = fs::path(o.out_root) / stem;
  for (int k = 2; fs::exists(p); ++k) p = fs::path(o.out_root) / (stem + "-" + std::to_string(k));
  fs::create_directories(p);
  return p;
}

inline logging::Level parse_level(const std::string& s) {
  static const std::map<std::string, logging::Level> levels = {{"debug", logging::Level::debug},
                                                               {"info", logging::Level::info},
                                                               {"warn", logging::Level::warn},
                                                               {"error", logging::Level::error},
                                                               {"off", logging::Level::off}};
  auto it = levels.find(s);
  if (it == levels.end()) throw UsageError("--log-level must be one of debug, info, warn, error, off");
  return it->second;
}

inline fs::path require_path(const std::string& p, const char* flag) {
  if (p.empty()) throw UsageError(std::string(flag) + " is required");
  if (!fs::exists(p)) throw DataError(std::string(flag) + ": '" + p + "' does not exist");
  return p;
}

inline Vocabulary load_vocab(const Options& o) {
  return Vocabulary::from_json(io::read_json(require_path(o.vocab, "--vocab")));
}

inline CorpusBundle load_tokenized(const Options& o, const Vocabulary& vocab) {
  auto b = load_corpus(require_path(o.world, "--world"));
  b.data.tokenize(vocab);
  return b;
}

inline std::string model_precision(const std::string& bytes) {
  const auto ck = decode_checkpoint(bytes);
  try {
    return ck.meta.at("model").value("precision", std::string("f32"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

/// Call f(Model<T>&, checkpoint bytes) with T matching the checkpoint's precision.
template <class F>
void with_model(const Options& o, F&& f) {
  const std::string bytes = io::read_text(require_path(o.model, "--model"));
  if (model_precision(bytes) == "f64") {
    auto m = Model<double>::load(bytes);
    f(m, bytes);
  } else {
    auto m = Model<float>::load(bytes);
    f(m, bytes);
  }
}

inline void check_vocab_matches(std::size_t model_vocab, const Vocabulary& vocab) {
  if (model_vocab != vocab.size()) {
    throw DataError("model vocabulary size " + std::to_string(model_vocab) + " does not match the tokenizer's " +
                    std::to_string(vocab.size()));
  }
}

inline const std::vector<ParaphraseGroup>& split_groups(const CorpusBundle& b, const std::string& split) {
  if (split == "test") return b.splits.test_groups;
  if (split == "val") return b.splits.val_groups;
  throw UsageError("--split must be 'test' or 'val'");
}

inline std::vector<std::string> eval_languages(const CorpusBundle& b, const Options& o) {
  return o.all_languages ? b.languages : b.training_languages();
}

/// Captions whose tokens define the per-language word spaces: the training and adaptation splits.
inline std::vector<CaptionRecord> word_space_captions(const CorpusBundle& b) {
  std::vector<CaptionRecord> caps;
  for (const auto* ids : {&b.splits.train, &b.splits.adapt})
    for (const auto& id : *ids) caps.push_back(b.data.caption(id));
  return caps;
}

inline void emit(const Run& run, const fs::path& p) { *run.out << p.string() << '\n'; }

inline void write_summary(const Run& run, const nlohmann::json& j) {
  io::write_json(run.dir / "summary.json", j);
  emit(run, run.dir);
}

inline void emit_report(const Run& run, const RetrievalReport& r, const std::string& model_bytes) {
  write_report(run.dir, r, content_hash(model_bytes));
  emit(run, run.dir);
}

// ---- subcommands ----

inline void cmd_gen_world(const Run& run, const Options&) {
  run.cfg.world.validate();
  write_world(run.dir / "world", generate_world(run.cfg.world));
  emit(run, run.dir / "world");
}

inline void cmd_train_bpe(const Run& run, const Options& o) {
  const auto b = load_corpus(require_path(o.world, "--world"));
  std::vector<std::string> texts;
  for (const auto* ids : {&b.splits.train, &b.splits.adapt})
    for (const auto& id : *ids) texts.push_back(b.data.caption(id).text);
  if (texts.empty()) throw DataError("train-bpe: no training captions");
  const auto vocab = train_bpe(texts, run.cfg.tokenizer.vocab_size);
  io::write_json(run.dir / "vocab.json", vocab.to_json());
  logging::info("train-bpe: " + std::to_string(vocab.size()) + " tokens");
  emit(run, run.dir / "vocab.json");
}

inline ModelConfig resolve_model_config(ModelConfig mc, const Vocabulary& vocab, std::size_t feature_dim) {
  if (mc.vocab_size == 0) mc.vocab_size = vocab.size();
  check_vocab_matches(mc.vocab_size, vocab);
  if (mc.image_feat_dim != feature_dim) {
    logging::info("model.image_feat_dim set to the corpus feature dimension " + std::to_string(feature_dim));
    mc.image_feat_dim = feature_dim;
  }
  mc.validate();
  return mc;
}

inline nlohmann::json result_json(const TrainResult& r) {
  return {{"best_epoch", r.best_epoch},
          {"best_val", r.best_val},
          {"initial_loss", r.initial_loss},
          {"first_epoch_loss", r.first_epoch_loss},
          {"last_epoch_loss", r.last_epoch_loss}};
}

inline void cmd_train(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  const auto ts = make_training_set(b, vocab);
  const auto mc = resolve_model_config(run.cfg.model, vocab, ts.feature_dim);
  auto go = [&](auto tag) {
    using T = decltype(tag);
    Model<T> model(mc);
    const auto res = train(model, ts, run.cfg.train, run.cfg.losses, run.dir);
    io::write_text(run.dir / "model.gtck", model.save({{"best_epoch", res.best_epoch}}));
    io::write_json(run.dir / "summary.json", result_json(res));
  };
  if (mc.precision == "f64") go(double{});
  else go(float{});
  emit(run, run.dir / "model.gtck");
}

inline void cmd_adapt(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  const auto ts = make_training_set(b, vocab);
  std::vector<TextRecord> records;
  for (const auto& r : ts.adapt)
    if (o.lang.empty() || r.lang == o.lang) records.push_back(r);
  with_model(o, [&](auto& model, const std::string&) {
    check_vocab_matches(model.config().vocab_size, vocab);
    const auto anchors = build_anchor_cache(model, ts, run.cfg.train.adapt_anchors, run.cfg.train.seed);
    const auto res = adapt_language(model, anchors, records, ts, run.cfg.train, run.cfg.losses);
    io::write_text(run.dir / "model.gtck", model.save({{"adapted", o.lang.empty() ? "all" : o.lang}}));
    io::write_json(run.dir / "summary.json", result_json(res));
  });
  emit(run, run.dir / "model.gtck");
}

inline void cmd_mine_word_gt(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  const auto& groups = split_groups(b, o.split);
  const auto langs = eval_languages(b, o);
  std::vector<WordTranslationGT> gts;
  for (std::size_t i = 0; i < langs.size(); ++i)
    for (std::size_t j = i + 1; j < langs.size(); ++j)
      gts.push_back(mine_word_gt(aligned_sentences(b.data, groups, langs[i], langs[j]), vocab, langs[i], langs[j],
                                 run.cfg.align.gt_top));
  io::write_json(run.dir / "word_gt.json", to_json(gts, vocab));
  nlohmann::json summary = {{"language_pairs", gts.size()}};
  std::size_t total = 0;
  for (const auto& g : gts) total += g.pairs.size();
  summary["pairs"] = total;
  if (o.check_truth) {
    const auto truth = load_ground_truth(o.world);
    double agree = 0, content = 0, weight = 0;
    for (const auto& g : gts) {
      const double a = word_map_agreement(g, truth, vocab);
      const double c = concept_pair_fraction(g, truth, vocab);
      summary["agreement"][g.lang_a + "-" + g.lang_b] = a;
      summary["concept_pairs"][g.lang_a + "-" + g.lang_b] = c;
      agree += a * static_cast<double>(g.pairs.size());
      content += c * static_cast<double>(g.pairs.size());
      weight += static_cast<double>(g.pairs.size());
    }
    summary["agreement_overall"] = weight > 0 ? agree / weight : 0.0;
    summary["concept_pairs_overall"] = weight > 0 ? content / weight : 0.0;
  }
  io::write_json(run.dir / "summary.json", summary);
  emit(run, run.dir / "word_gt.json");
}

inline void cmd_procrustes(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  const auto sets = language_token_sets(word_space_captions(b), vocab, run.cfg.align.min_count);
  with_model(o, [&](auto& model, const std::string&) {
    check_vocab_matches(model.config().vocab_size, vocab);
    const auto& a = run.cfg.align;
    const auto maps = align_word_spaces(word_spaces(model, sets), a.k, a.max_rounds, a.tol);
    io::write_text(run.dir / "maps.gtck", maps_to_bytes(maps));
    nlohmann::json s = {{"languages", maps.languages}, {"rounds", maps.rounds}, {"objective", maps.objective}};
    for (std::size_t l = 0; l < maps.languages.size(); ++l) {
      s["anchors"][maps.languages[l]] = maps.anchors[l].size();
      s["included"][maps.languages[l]] = static_cast<bool>(maps.included[l]);
    }
    io::write_json(run.dir / "summary.json", s);
  });
  emit(run, run.dir / "maps.gtck");
}

inline void cmd_eval_sentence(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  const auto set = sample_groups(make_paraphrase_set(b.data, split_groups(b, o.split), eval_languages(b, o)),
                                 run.cfg.eval.n_queries, run.cfg.eval.seed);
  with_model(o, [&](auto& model, const std::string& bytes) {
    check_vocab_matches(model.config().vocab_size, vocab);
    auto rep = to_report(sentence_retrieval_eval(model, set), set.languages);
    rep.meta["split"] = o.split;
    emit_report(run, rep, bytes);
  });
}

inline void cmd_eval_word(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  const auto gts = word_gt_from_json(io::read_json(require_path(o.gt, "--gt")), vocab);
  std::optional<ProcrustesMaps> maps;
  if (!o.maps.empty()) maps = maps_from_bytes(io::read_text(require_path(o.maps, "--maps")));
  const auto sets = language_token_sets(word_space_captions(b), vocab, run.cfg.align.min_count);
  with_model(o, [&](auto& model, const std::string& bytes) {
    check_vocab_matches(model.config().vocab_size, vocab);
    const auto ws = word_spaces(model, sets);
    if (maps && maps->languages != ws.languages) throw DataError("--maps languages differ from the word spaces");
    emit_report(run, word_retrieval_eval(ws, maps ? &*maps : nullptr, gts, run.cfg.eval.exclude_identical,
                                         run.cfg.eval.recall_k),
                bytes);
  });
}

inline void cmd_eval_crossmodal(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  with_model(o, [&](auto& model, const std::string& bytes) {
    check_vocab_matches(model.config().vocab_size, vocab);
    emit_report(run,
                crossmodal_retrieval_eval(model, b.data, split_groups(b, o.split), eval_languages(b, o),
                                          run.cfg.eval.pairs_per_language, run.cfg.eval.seed),
                bytes);
  });
}

inline std::map<std::string, std::vector<std::vector<TokenId>>> sentences_by_language(
    const CorpusBundle& b, const std::vector<ParaphraseGroup>& groups, const std::vector<std::string>& langs,
    std::vector<std::string>* ids = nullptr) {
  std::map<std::string, std::vector<std::vector<TokenId>>> out;
  for (const auto& l : langs) {
    auto& v = out[l];
    for (const auto& g : groups) {
      auto it = g.captions.find(l);
      if (it == g.captions.end()) continue;
      v.push_back(b.data.caption(it->second).tokens);
      if (ids) ids->push_back(it->second);
    }
  }
  return out;
}

inline void cmd_probe(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  const auto langs = eval_languages(b, o);
  const auto sentences = sentences_by_language(b, split_groups(b, o.split), langs);
  ProbeConfig pc;
  pc.epochs = run.cfg.eval.probe_epochs;
  pc.seed = run.cfg.eval.seed;
  with_model(o, [&](auto& model, const std::string& bytes) {
    check_vocab_matches(model.config().vocab_size, vocab);
    emit_report(run, to_report(sentence_correspondence_probe(model, langs, sentences, pc)), bytes);
  });
}

inline void cmd_cluster(const Run& run, const Options& o) {
  const auto vocab = load_vocab(o);
  const auto b = load_tokenized(o, vocab);
  const auto truth = load_ground_truth(require_path(o.world, "--world"));
  const auto langs = eval_languages(b, o);
  std::vector<std::string> ids;
  const auto by_lang = sentences_by_language(b, split_groups(b, o.split), langs, &ids);
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::size_t> lang_of;
  for (std::size_t l = 0; l < langs.size(); ++l)
    for (const auto& s : by_lang.at(langs[l])) {
      seqs.push_back(s);
      lang_of.push_back(l);
    }
  std::vector<std::vector<std::size_t>> concepts;
  std::size_t n_concepts = 0;
  for (const auto& id : ids) {
    auto it = truth.caption_concepts.find(id);
    if (it == truth.caption_concepts.end()) throw DataError("cluster: no concepts recorded for caption '" + id + "'");
    auto& c = concepts.emplace_back();
    for (int x : it->second) {
      c.push_back(static_cast<std::size_t>(x));
      n_concepts = std::max(n_concepts, static_cast<std::size_t>(x) + 1);
    }
  }
  with_model(o, [&](auto& model, const std::string& bytes) {
    check_vocab_matches(model.config().vocab_size, vocab);
    const auto emb = embed_texts(model, seqs).template cast<double>();
    const auto& e = run.cfg.eval;
    auto rep = to_report(cluster_report(emb, lang_of, concepts, e.clusters, langs.size(), n_concepts, e.seed,
                                        e.cluster_restarts));
    rep.languages = langs;
    emit_report(run, rep, bytes);
  });
}

inline void cmd_report(const Run& run, const Options& o) {
  if (o.inputs.empty()) throw UsageError("report: --inputs needs at least one report file");
  // Directories contribute every report JSON they hold; run bookkeeping files are skipped.
  std::vector<fs::path> files;
  for (const auto& in : o.inputs) {
    const fs::path p = require_path(in, "--inputs");
    if (!fs::is_directory(p)) {
      files.push_back(p);
      continue;
    }
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(p)) {
      const auto name = e.path().filename().string();
      if (e.path().extension() == ".json" && name != "config.json" && name != "summary.json") found.push_back(e.path());
    }
    std::sort(found.begin(), found.end());
    files.insert(files.end(), found.begin(), found.end());
  }
  if (files.empty()) throw DataError("report: no report files found");
  nlohmann::json summary = {{"reports", nlohmann::json::array()}, {"by_protocol", nlohmann::json::object()}};
  for (const auto& path : files) {
    const auto rep = report_from_json(io::read_json(path));
    summary["reports"].push_back({{"file", path.filename().string()},
                                  {"protocol", rep.protocol},
                                  {"metrics", rep.metrics}});
    auto& slot = summary["by_protocol"][rep.protocol];
    if (slot.is_null()) slot = nlohmann::json::array();
    slot.push_back(rep.metrics);
  }
  write_summary(run, summary);
}

}  // namespace detail

/// Parse and run one command. Returns the process exit code; diagnostics go to `err`.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Multilingual image-caption alignment toolkit"};
  app.name("pivot");
  app.footer(detail::config_key_listing());
  app.allow_extras();
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  app.add_option("--config", o.config_path, "JSON run configuration");
  app.add_option("--run-dir", o.run_dir, "Exact output directory (must be new or empty)");
  app.add_option("--out", o.out_root, "Parent of generated run directories")->capture_default_str();
  app.add_option("--threads", o.threads, "Worker thread cap")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--log-level", o.log_level, "debug, info, warn, error or off")->capture_default_str();

  using Handler = void (*)(const Run&, const Options&);
  std::vector<std::pair<CLI::App*, Handler>> commands;
  auto sub = [&](const char* name, const char* help, Handler h) {
    auto* s = app.add_subcommand(name, help);
    s->allow_extras();
    commands.emplace_back(s, h);
    return s;
  };
  auto world = [&](CLI::App* s) { s->add_option("--world", o.world, "World directory")->required(); };
  auto vocab = [&](CLI::App* s) { s->add_option("--vocab", o.vocab, "Tokenizer vocab.json")->required(); };
  auto model = [&](CLI::App* s) { s->add_option("--model", o.model, "Model checkpoint")->required(); };
  auto split = [&](CLI::App* s) {
    s->add_option("--split", o.split, "Evaluation split: test or val")->capture_default_str();
    s->add_flag("--all-languages", o.all_languages, "Include held-out languages");
  };

  sub("gen-world", "Generate a synthetic world", detail::cmd_gen_world);
  auto* bpe = sub("train-bpe", "Train the BPE tokenizer", detail::cmd_train_bpe);
  world(bpe);
  auto* tr = sub("train", "Train the model", detail::cmd_train);
  world(tr);
  vocab(tr);
  tr->add_flag("--no-lt", o.no_lt, "Disable the text-text transitive loss");
  tr->add_flag("--no-lv", o.no_lv, "Disable the image-image loss");
  tr->add_flag("--no-lx", o.no_lx, "Disable the text-image loss");
  tr->add_flag("--no-lc", o.no_lc, "Disable the cloze loss");
  tr->add_flag("--supervised-alpha", o.supervised_alpha, "Use translation pairs as targets");
  auto* ad = sub("adapt", "Adapt a trained model to held-out languages", detail::cmd_adapt);
  world(ad);
  vocab(ad);
  model(ad);
  ad->add_option("--lang", o.lang, "Only this language (default: every held-out language)");
  auto* mine = sub("mine-word-gt", "Mine word translation pairs from aligned captions", detail::cmd_mine_word_gt);
  world(mine);
  vocab(mine);
  split(mine);
  mine->add_flag("--check-truth", o.check_truth, "Score mined pairs against the world's ground truth");
  auto* pr = sub("procrustes", "Fit orthogonal maps between word spaces", detail::cmd_procrustes);
  world(pr);
  vocab(pr);
  model(pr);
  for (auto [name, help, h] : {std::tuple{"eval-sentence", "Sentence retrieval across languages", &detail::cmd_eval_sentence},
                               std::tuple{"eval-crossmodal", "Text-image retrieval", &detail::cmd_eval_crossmodal},
                               std::tuple{"probe-correspondence", "Sentence-correspondence probe", &detail::cmd_probe},
                               std::tuple{"cluster", "Cluster caption embeddings", &detail::cmd_cluster}}) {
    auto* s = sub(name, help, h);
    world(s);
    vocab(s);
    model(s);
    split(s);
  }
  auto* ew = sub("eval-word", "Word translation retrieval", detail::cmd_eval_word);
  world(ew);
  vocab(ew);
  model(ew);
  ew->add_option("--gt", o.gt, "word_gt.json from mine-word-gt")->required();
  ew->add_option("--maps", o.maps, "maps.gtck from procrustes");
  auto* rp = sub("report", "Merge report files into one summary", detail::cmd_report);
  rp->add_option("--inputs", o.inputs, "Report JSON files or run directories")->required();

  auto fail = [&](int code, const std::string& kind, std::string msg) {
    for (auto& c : msg)
      if (c == '\n' || c == '\r') c = ' ';
    err << "pivot: " << kind << ": " << msg << '\n';
    return code;
  };

  try {
    std::vector<const char*> argv{"pivot"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      return fail(1, "usage error", e.what());
    }
    logging::set_level(detail::parse_level(o.log_level));
    Eigen::setNbThreads(static_cast<int>(o.threads));

    Run run;
    run.out = &out;
    Handler handler = nullptr;
    for (auto& [s, h] : commands)
      if (s->parsed()) {
        run.command = s->get_name();
        handler = h;
      }
    if (!o.config_path.empty()) run.cfg = load_run_config(o.config_path);
    std::vector<std::string> extras = app.remaining();
    for (auto& [s, h] : commands)
      if (s->parsed())
        for (auto& x : s->remaining()) extras.push_back(x);
    for (const auto& x : extras) {
      if (x.rfind("--", 0) != 0 || x.find('=') == std::string::npos) {
        throw UsageError("unexpected argument '" + x + "' (overrides take the form --section.key=value)");
      }
      apply_override(run.cfg, x.substr(2));
    }
    auto& lc = run.cfg.losses;
    if (o.no_lt) lc.use_lt = false;
    if (o.no_lv) lc.use_lv = false;
    if (o.no_lx) lc.use_lx = false;
    if (o.no_lc) lc.use_lc = false;
    if (o.supervised_alpha) run.cfg.train.supervised_alpha = true;
    if (run.command == "train" || run.command == "adapt") {
      if (!lc.any_enabled()) throw UsageError(run.command + ": every objective is disabled");
      lc.validate();
      run.cfg.train.validate(lc);
    }

    nlohmann::json resolved = {{"command", run.command},
                               {"config", to_json(run.cfg)},
                               {"inputs",
                                {{"world", o.world},
                                 {"vocab", o.vocab},
                                 {"model", o.model},
                                 {"gt", o.gt},
                                 {"maps", o.maps},
                                 {"split", o.split},
                                 {"lang", o.lang},
                                 {"all_languages", o.all_languages},
                                 {"reports", o.inputs}}}};
    const std::string text = resolved.dump(2);
    run.dir = detail::make_run_dir(o, run.command, content_hash(text));
    io::write_text(run.dir / "config.json", text + "\n");
    logging::info("resolved config: " + resolved.dump());
    handler(run, o);
    return 0;
  } catch (const UsageError& e) {
    return fail(1, "usage error", e.what());
  } catch (const DataError& e) {
    return fail(2, "data error", e.what());
  } catch (const NumericError& e) {
    return fail(3, "numeric error", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(2, "data error", e.what());
  } catch (const std::exception& e) {
    return fail(2, "error", e.what());
  }
}

inline int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace pivot::cli
