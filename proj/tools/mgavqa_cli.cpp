// mgavqa: command-line front end for the document QA pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mgavqa/mgavqa.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mgavqa;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string embeddings;
  bool no_graph = false;
  bool no_memory = false;
  bool no_compression = false;
  bool no_fusion = false;
  std::optional<std::size_t> workers;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool toggles = true) {
  cmd->add_option("--config", o.config, "pipeline config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "seed (overrides the config)");
  cmd->add_option("--embeddings", o.embeddings, "synthetic, an .mgav file, or a directory of <doc id>.mgav");
  cmd->add_option("--workers", o.workers, "document worker threads (0 = all cores)");
  cmd->add_option("--out", o.out, "output path (default stdout)");
  if (toggles) {
    cmd->add_flag("--no-graph", o.no_graph, "skip the GCN; raw node features stand in");
    cmd->add_flag("--no-memory", o.no_memory, "zero the integrated memory vector");
    cmd->add_flag("--no-compression", o.no_compression, "keep every visual token");
    cmd->add_flag("--no-fusion", o.no_fusion, "answer with the top direct-memory candidate");
  }
}

pipeline::PipelineConfig make_config(const CommonOptions& o) {
  pipeline::PipelineConfig cfg = o.config.empty() ? pipeline::PipelineConfig{} : pipeline::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.embeddings.empty()) cfg.embeddings = o.embeddings;
  if (o.workers) cfg.workers = *o.workers;
  if (o.no_graph) cfg.toggles.use_graph = false;
  if (o.no_memory) cfg.toggles.use_memory = false;
  if (o.no_compression) cfg.toggles.use_compression = false;
  if (o.no_fusion) cfg.toggles.use_fusion = false;
  cfg.validate();
  return cfg;
}

void emit(const std::string& out, const json& j) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    ingest::write_file(out, text);
  }
}

fusion::FusionWeights weights_for(const std::string& path, const std::vector<Document>& train,
                                  const pipeline::PipelineConfig& cfg) {
  if (!path.empty()) {
    auto w = fusion::load_weights(path);
    if (w.dim() != cfg.d) throw ConfigError("weights file has d = " + std::to_string(w.dim()) + ", config has " + std::to_string(cfg.d));
    return w;
  }
  if (train.empty()) throw ConfigError("no --weights given and the corpus has no training split");
  pipeline::PipelineConfig full = cfg;
  full.toggles = {};
  return pipeline::fit(train, full).weights;
}

const Question& pick_question(const Document& doc, std::optional<long long> id, const std::string& text, Question& scratch) {
  if (!text.empty()) {
    scratch = Question{id.value_or(-1), text, std::nullopt, std::nullopt};
    if (id) {
      if (const Question* q = doc.find_question(*id); q && q->text == text) return *q;
    }
    return scratch;
  }
  if (id) {
    const Question* q = doc.find_question(*id);
    if (!q) throw KeyedError("question:" + std::to_string(*id), "no such question in document");
    return *q;
  }
  if (doc.questions.empty()) throw ConfigError("document has no questions; pass --question");
  return doc.questions.front();
}

json prediction_json(const pipeline::Prediction& p) {
  return {{"doc_id", p.doc_id},
          {"question_id", p.question_id},
          {"span_id", p.span_id},
          {"answer", p.answer_text},
          {"prob", p.prob},
          {"bbox_pred", p.bbox_pred},
          {"span_bbox", ingest::bbox_to_json(p.span_bbox)}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph- and memory-augmented document question answering"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic key-value form corpus");
  synthgen::SynthConfig sc;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n-docs", sc.n_docs, "number of documents")->capture_default_str();
  synth->add_option("--seed", sc.seed, "corpus seed")->capture_default_str();
  synth->add_option("--keys-min", sc.keys_min)->capture_default_str();
  synth->add_option("--keys-max", sc.keys_max)->capture_default_str();
  synth->add_option("--jitter", sc.jitter, "vertical value jitter in px")->capture_default_str();
  synth->add_option("--train-fraction", sc.train_fraction)->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "fit the answer and box heads on a corpus training split");
  CommonOptions train_o;
  std::string train_corpus;
  add_common(train, train_o);
  train->add_option("--corpus", train_corpus, "corpus directory or manifest")->required()->check(CLI::ExistingPath);
  train->get_option("--out")->description("checkpoint path (default weights.json)");

  // answer / trace
  CommonOptions answer_o, trace_o;
  std::string answer_doc, answer_weights, answer_text, trace_doc, trace_weights, trace_text;
  std::optional<long long> answer_qid, trace_qid;
  auto* answer = app.add_subcommand("answer", "answer one question about one document");
  add_common(answer, answer_o);
  answer->add_option("--doc", answer_doc, "document JSON")->required()->check(CLI::ExistingFile);
  answer->add_option("--weights", answer_weights, "head checkpoint")->required()->check(CLI::ExistingFile);
  answer->add_option("--question", answer_text, "question text");
  answer->add_option("--question-id", answer_qid, "question id inside the document");
  auto* trace = app.add_subcommand("trace", "answer one question and emit the full reasoning trace");
  add_common(trace, trace_o);
  trace->add_option("--doc", trace_doc, "document JSON")->required()->check(CLI::ExistingFile);
  trace->add_option("--weights", trace_weights, "head checkpoint")->required()->check(CLI::ExistingFile);
  trace->add_option("--question", trace_text, "question text");
  trace->add_option("--question-id", trace_qid, "question id inside the document");

  // eval / ablate
  CommonOptions eval_o, ablate_o;
  std::string eval_corpus, eval_weights, eval_split = "eval", ablate_corpus, ablate_weights;
  auto* evalc = app.add_subcommand("eval", "score a corpus split and write a report");
  add_common(evalc, eval_o);
  evalc->add_option("--corpus", eval_corpus, "corpus directory or manifest")->required()->check(CLI::ExistingPath);
  evalc->add_option("--weights", eval_weights, "head checkpoint (default: fit on the training split)")->check(CLI::ExistingFile);
  evalc->add_option("--split", eval_split, "which split to score")->check(CLI::IsMember({"train", "eval", "all"}))->capture_default_str();
  auto* ablate = app.add_subcommand("ablate", "score the full pipeline and each single-module knockout");
  add_common(ablate, ablate_o, false);
  ablate->add_option("--corpus", ablate_corpus, "corpus directory or manifest")->required()->check(CLI::ExistingPath);
  ablate->add_option("--weights", ablate_weights, "head checkpoint (default: fit on the training split)")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const auto docs = synthgen::generate_corpus(sc);
      const auto manifest = synthgen::write_corpus(synth_out, docs, sc);
      std::cout << json{{"out", synth_out}, {"train", manifest["train"].size()}, {"eval", manifest["eval"].size()}}.dump() << "\n";
    } else if (*train) {
      const auto cfg = make_config(train_o);
      const auto split = synthgen::load_corpus(train_corpus);
      const auto fit = pipeline::fit(split.train, cfg);
      const json meta = {{"seed", cfg.seed}, {"toggles", pipeline::toggles_to_json(cfg.toggles)}};
      const fs::path out = train_o.out.empty() ? fs::path("weights.json") : fs::path(train_o.out);
      fusion::save_weights(out, fit.weights, meta);
      std::cout << json{{"weights", out.string()},
                        {"examples", fit.examples},
                        {"skipped", fit.skipped},
                        {"loss_initial", fit.loss_history.front()},
                        {"loss_final", fit.loss_history.back()}}
                       .dump()
                << "\n";
    } else if (*answer || *trace) {
      const bool is_trace = trace->parsed();
      const auto& o = is_trace ? trace_o : answer_o;
      const auto cfg = make_config(o);
      const Document doc = ingest::load_document(is_trace ? trace_doc : answer_doc);
      const auto w = fusion::load_weights(is_trace ? trace_weights : answer_weights);
      Question scratch;
      const Question& q = pick_question(doc, is_trace ? trace_qid : answer_qid, is_trace ? trace_text : answer_text, scratch);
      const auto ctx = pipeline::prepare_document(doc, cfg);
      const auto p = pipeline::answer_question(ctx, q, cfg, w);
      emit(o.out, is_trace ? p.trace : prediction_json(p));
    } else if (*evalc) {
      const auto cfg = make_config(eval_o);
      auto split = synthgen::load_corpus(eval_corpus);
      const auto w = weights_for(eval_weights, split.train, cfg);
      std::vector<Document> docs;
      if (eval_split != "eval") docs.insert(docs.end(), split.train.begin(), split.train.end());
      if (eval_split != "train") docs.insert(docs.end(), split.eval.begin(), split.eval.end());
      auto report = eval::report_to_json(pipeline::evaluate(docs, cfg, w));
      report["toggles"] = pipeline::toggles_to_json(cfg.toggles);
      report["seed"] = cfg.seed;
      emit(eval_o.out, report);
    } else if (*ablate) {
      const auto cfg = make_config(ablate_o);
      const auto split = synthgen::load_corpus(ablate_corpus);
      const auto w = weights_for(ablate_weights, split.train, cfg);
      emit(ablate_o.out, json{{"seed", cfg.seed}, {"rows", pipeline::ablation_to_json(pipeline::ablate(split.eval, cfg, w))}});
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
