#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "qih/datagen.hpp"
#include "qih/encoder.hpp"
#include "qih/evaluator.hpp"
#include "qih/http.hpp"
#include "qih/serving.hpp"
#include "qih/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qih;

namespace {

ConfigBlock read_config(const std::string& path) {
    return path.empty() ? ConfigBlock{} : parse_config_text(read_file(path));
}

const std::set<std::string> kHyperKeys{"learning_rate", "batch_size", "steps_per_epoch", "epochs", "seed", "dropout"};
const std::set<std::string> kEncoderKeys{"layers",     "hidden",      "heads",  "feed_forward",
                                         "vocab_size", "max_positions", "token_types"};

void check_keys(const ConfigBlock& c, const std::string& path, std::initializer_list<const std::set<std::string>*> sets,
                std::set<std::string> extra) {
    for (const auto* s : sets) extra.insert(s->begin(), s->end());
    for (const auto& [k, v] : c)
        if (!extra.count(k)) throw std::runtime_error(path + ": unknown config key '" + k + "'");
}

std::string get(const ConfigBlock& c, const std::string& key, const std::string& fallback) {
    auto it = c.find(key);
    return it == c.end() ? fallback : it->second;
}

// Relative paths in a config file are taken relative to the file.
std::string resolve(const std::string& config_path, const std::string& p) {
    if (p.empty() || fs::path(p).is_absolute() || config_path.empty()) return p;
    return (fs::path(config_path).parent_path() / p).string();
}

void save_vocab(const std::string& path, const Vocab& v) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    for (const auto& t : v.tokens()) f << t << '\n';
}

void save_history(const std::string& path, const TrainingHistory& h) {
    std::ofstream f(path);
    write_history_csv(f, h);
}

json metrics_json(const MetricsReport& m) {
    json j{{"accuracy", m.accuracy}, {"threshold", m.threshold}, {"tp", m.tp}, {"fp", m.fp}, {"tn", m.tn}, {"fn", m.fn}};
    j["precision"] = m.precision ? json(*m.precision) : json(nullptr);
    j["recall"] = m.recall ? json(*m.recall) : json(nullptr);
    return j;
}

int cmd_tokenize(const std::string& vocab_path, const std::string& query, int max_pieces) {
    const auto vocab = load_vocab(vocab_path);
    const auto t = tokenize(query, vocab, max_pieces);
    json pieces = json::array();
    for (auto id : t.ids) pieces.push_back(vocab.token(id));
    std::cout << json{{"ids", t.ids}, {"attention_mask", t.attention_mask}, {"tokens", pieces}}.dump() << '\n';
    return 0;
}

int cmd_count(const EncoderConfig& c, std::size_t frozen, std::uint64_t head) {
    const auto p = count_parameters(c, {frozen}, head);
    std::cout << json{{"total", p.total}, {"trainable", p.trainable}}.dump() << '\n';
    return 0;
}

int cmd_generate(const std::string& config_path, const std::string& out) {
    const auto c = read_config(config_path);
    check_keys(c, config_path, {}, {"seed", "noise_rate", "marker_probability", "examples_per_intent", "log_records"});
    SyntheticSpec spec;
    spec.seed = std::stoull(get(c, "seed", "1"));
    spec.noise_rate = std::stod(get(c, "noise_rate", "0"));
    spec.marker_probability = std::stod(get(c, "marker_probability", std::to_string(spec.marker_probability)));
    const auto per_intent = std::stoul(get(c, "examples_per_intent", "20000"));
    const auto log_records = std::stoul(get(c, "log_records", "60000"));
    SyntheticWorld world(spec);
    fs::create_directories(out);
    save_vocab(out + "/vocab.txt", world.vocab());
    world.taxonomy().save(out + "/taxonomy.tsv");
    const auto log = generate_synthetic_log(world, log_records);
    {
        std::ofstream f(out + "/log.tsv");
        write_log_tsv(f, log.records);
    }
    for (std::size_t i = 0; i < spec.intents.size(); ++i) {
        const auto& name = spec.intents[i].name;
        const auto ex = generate_intent_examples(world, name, per_intent, spec.seed * 1000 + i);
        std::ofstream f(out + "/intent_" + name + ".tsv");
        write_labeled_tsv(f, ex);
    }
    std::cout << json{{"out", out}, {"leaves", world.leaves().size()}, {"vocab", world.vocab().size()}}.dump() << '\n';
    return 0;
}

int cmd_train_domain(const std::string& data, const std::string& config_path, const std::string& out) {
    const auto c = read_config(config_path);
    check_keys(c, config_path, {&kHyperKeys, &kEncoderKeys},
               {"vocab", "taxonomy", "max_pieces", "click_weight", "purchase_weight", "min_score", "init_seed"});
    const auto vocab = load_vocab(resolve(config_path, get(c, "vocab", "vocab.txt")));
    const auto taxonomy = Taxonomy::load(resolve(config_path, get(c, "taxonomy", "taxonomy.tsv")));
    auto ec = EncoderConfig::from_config(c);
    if (!c.count("vocab_size")) ec.vocab_size = vocab.size();
    const auto defaults = Hyperparameters::desk_domain();
    const auto hyper = Hyperparameters::from_config(c, defaults);
    const int max_pieces = std::stoi(get(c, "max_pieces", "12"));
    ActionWeights w{std::stod(get(c, "click_weight", "1")), std::stod(get(c, "purchase_weight", "5"))};
    const auto agg = aggregate_query_categories(load_log_tsv(data), std::stod(get(c, "min_score", "3")), w);
    const auto parts = split(agg.examples, {0.8, 0.1, 0.1}, hyper.seed);
    const auto train = make_category_dataset(parts.train, vocab, taxonomy, max_pieces);
    const auto val = make_category_dataset(parts.validation, vocab, taxonomy, max_pieces);
    const auto test = make_category_dataset(parts.test, vocab, taxonomy, max_pieces);
    auto model = make_domain_model(ec, taxonomy, std::stoull(get(c, "init_seed", "42")));
    const auto hist = train_domain(model, train, val, hyper);
    fs::create_directories(out);
    save_domain_model(out, model);
    save_vocab(out + "/vocab.txt", vocab);
    taxonomy.save(out + "/taxonomy.tsv");
    save_history(out + "/history.csv", hist);
    const auto scores = category_scores(model, test.tokens);
    const auto hv = hierarchy_violation_rate(std::span<const std::vector<float>>(scores), taxonomy);
    json report{{"queries", agg.examples.size()},
                {"dropped_queries", agg.dropped_queries},
                {"best_epoch", hist.best_epoch},
                {"val_micro_f1", hist.epochs[hist.best_epoch - 1].val_metric},
                {"test_micro_f1", micro_f1(scores, test.targets)},
                {"hierarchy_violation_rate", hv.rate},
                {"hierarchy_edges", hv.edges},
                {"encoder_fingerprint", encoder_fingerprint(model.encoder)}};
    std::ofstream(out + "/report.json") << report.dump(2) << '\n';
    std::cout << report.dump() << '\n';
    return 0;
}

int cmd_finetune(const std::string& intent, std::size_t frozen, const std::string& base, const std::string& data,
                 const std::string& out, const std::string& config_path, std::string vocab_path, std::size_t layer) {
    const auto c = read_config(config_path);
    check_keys(c, config_path, {&kHyperKeys}, {"max_pieces", "head_seed", "threshold"});
    if (vocab_path.empty()) vocab_path = (fs::path(base).parent_path() / "vocab.txt").string();
    const auto vocab = load_vocab(vocab_path);
    const auto encoder = load_encoder(base);
    const auto hyper = Hyperparameters::from_config(c, Hyperparameters::desk_finetune());
    const int max_pieces = std::stoi(get(c, "max_pieces", "12"));
    const auto parts = split(load_labeled_tsv(data), {0.8, 0.1, 0.1}, hyper.seed);
    const auto train = make_intent_dataset(balance_downsample(parts.train, hyper.seed), vocab, max_pieces);
    const auto val = make_intent_dataset(parts.validation, vocab, max_pieces);
    const auto test = make_intent_dataset(parts.test, vocab, max_pieces);
    FinetuneOptions opt{intent, frozen, layer, std::stoull(get(c, "head_seed", "7"))};
    auto r = finetune_intent(encoder, train, val, opt, hyper);
    r.artifact.threshold = std::stod(get(c, "threshold", "0.5"));
    fs::create_directories(out);
    save_artifact(out + "/" + intent + ".qih", r.artifact);
    save_history(out + "/history.csv", r.history);
    const auto scores = score_intent(r.artifact, bind_encoder(r.artifact, encoder), test.tokens);
    {
        std::ofstream f(out + "/test_scores.txt");
        f.precision(9);
        for (float s : scores) f << s << '\n';
        std::ofstream l(out + "/test_labels.tsv");
        write_labeled_tsv(l, parts.test);
    }
    const auto m = confusion_metrics(to_scored(scores, test.labels), r.artifact.threshold);
    const auto pc = count_parameters(encoder.config, {frozen}, r.artifact.head.parameter_count());
    json report{{"intent", intent},
                {"frozen", frozen},
                {"trainable_parameters", pc.trainable},
                {"best_epoch", r.history.best_epoch},
                {"initial_loss", r.history.initial_loss},
                {"val_accuracy", r.history.epochs[r.history.best_epoch - 1].val_metric},
                {"test", metrics_json(m)},
                {"frozen_checksum", r.frozen_checksum_after}};
    std::ofstream(out + "/report.json") << report.dump(2) << '\n';
    std::cout << report.dump() << '\n';
    return 0;
}

std::vector<double> read_scores(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<double> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto fields = split_tabs(line);
        out.push_back(std::stod(fields.back()));
    }
    return out;
}

int cmd_eval(const std::string& scores_path, const std::string& labels_path, std::optional<double> threshold,
             std::optional<double> target, std::string roc_path) {
    const auto scores = read_scores(scores_path);
    const auto labels = load_labeled_tsv(labels_path);
    if (scores.size() != labels.size())
        throw std::runtime_error("eval: " + std::to_string(scores.size()) + " scores but " +
                                 std::to_string(labels.size()) + " labels");
    std::vector<ScoredExample> scored;
    for (std::size_t i = 0; i < scores.size(); ++i) scored.push_back({scores[i], labels[i].binary_label()});
    json report;
    if (target) {
        const auto t = tune_threshold(scored, *target);
        report["target_precision"] = *target;
        report["attainable"] = t.attainable;
        if (t.attainable) report["metrics"] = metrics_json(t.metrics);
    } else {
        report["metrics"] = metrics_json(confusion_metrics(scored, threshold.value_or(0.5)));
    }
    const auto roc = roc_curve(scored);
    report["auc"] = roc.auc;
    if (roc_path.empty()) roc_path = scores_path + ".roc.csv";
    std::ofstream f(roc_path);
    f.precision(17);
    f << "fpr,tpr,threshold\n";
    for (const auto& p : roc.points) f << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
    report["roc_csv"] = roc_path;
    std::cout << report.dump(2) << '\n';
    return 0;
}

int cmd_serve(const std::string& encoder_path, const std::string& registry_path, int port, std::string vocab_path,
              const std::string& host) {
    if (vocab_path.empty()) vocab_path = (fs::path(encoder_path).parent_path() / "vocab.txt").string();
    auto embeddings = std::make_shared<EmbeddingService>(load_encoder(encoder_path), load_vocab(vocab_path));
    auto registry = std::make_shared<IntentRegistry>(embeddings);
    for (const auto& spec : load_registry_file(registry_path)) registry->register_intent(spec);
    auto service = std::make_shared<IntentService>(embeddings, registry);
    httplib::Server server;
    install_routes(server, service);
    std::cerr << "serving " << registry->snapshot()->size() << " intents on " << host << ':' << port << '\n';
    if (!server.listen(host, port)) throw std::runtime_error("cannot listen on port " + std::to_string(port));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Query intent classification toolkit"};
    app.require_subcommand(1);

    auto* tok = app.add_subcommand("tokenize", "WordPiece-tokenize one query");
    std::string vocab, query;
    int max_pieces = 12;
    tok->add_option("--vocab", vocab, "Vocabulary file, one token per line")->required();
    tok->add_option("--query", query)->required();
    tok->add_option("--max-pieces", max_pieces);

    auto* count = app.add_subcommand("count-params", "Closed-form parameter count");
    EncoderConfig ec;
    std::size_t frozen = 0;
    std::uint64_t head_params = 0;
    std::size_t heads = 0, ff = 0;
    count->add_option("--layers", ec.num_layers)->required();
    count->add_option("--dim", ec.hidden)->required();
    count->add_option("--frozen", frozen)->required();
    count->add_option("--head-params", head_params)->required();
    count->add_option("--heads", heads, "Attention heads (default D/64, at least 1)");
    count->add_option("--ffn", ff, "Feed-forward width (default 4D)");
    count->add_option("--vocab-size", ec.vocab_size);
    count->add_option("--positions", ec.max_positions);

    auto* gen = app.add_subcommand("generate", "Write a synthetic world: vocab, taxonomy, log, intent sets");
    std::string config, out;
    gen->add_option("--config", config);
    gen->add_option("--out", out)->required();

    auto* dom = app.add_subcommand("train-domain", "Domain-specific training on category classification");
    std::string data;
    dom->add_option("--data", data, "Log TSV")->required();
    dom->add_option("--config", config)->required();
    dom->add_option("--out", out)->required();

    auto* ft = app.add_subcommand("finetune", "Fine-tune one intent on a frozen prefix");
    std::string intent, base;
    std::size_t layer = 0;
    ft->add_option("--intent", intent)->required();
    ft->add_option("--frozen", frozen)->required();
    ft->add_option("--base", base, "Encoder checkpoint")->required();
    ft->add_option("--data", data, "Labeled TSV")->required();
    ft->add_option("--out", out)->required();
    ft->add_option("--config", config);
    ft->add_option("--vocab", vocab, "Default: vocab.txt beside the base checkpoint");
    ft->add_option("--layer", layer, "CLS layer for fully frozen heads (default: last)");

    auto* ev = app.add_subcommand("eval", "Metrics, threshold tuning and ROC");
    std::string scores, labels, roc;
    std::optional<double> threshold, target;
    ev->add_option("--scores", scores)->required();
    ev->add_option("--labels", labels)->required();
    auto* t_opt = ev->add_option("--threshold", threshold);
    ev->add_option("--target-precision", target)->excludes(t_opt);
    ev->add_option("--roc", roc, "ROC CSV path (default: <scores>.roc.csv)");

    auto* sv = app.add_subcommand("serve", "HTTP intent service");
    std::string encoder, registry, host = "0.0.0.0";
    int port = 8080;
    sv->add_option("--encoder", encoder)->required();
    sv->add_option("--registry", registry)->required();
    sv->add_option("--port", port)->required();
    sv->add_option("--vocab", vocab, "Default: vocab.txt beside the encoder");
    sv->add_option("--host", host);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*tok) return cmd_tokenize(vocab, query, max_pieces);
        if (*count) {
            ec.heads = heads ? heads : std::max<std::size_t>(1, ec.hidden / 64);
            ec.feed_forward = ff ? ff : 4 * ec.hidden;
            return cmd_count(ec, frozen, head_params);
        }
        if (*gen) return cmd_generate(config, out);
        if (*dom) return cmd_train_domain(data, config, out);
        if (*ft) return cmd_finetune(intent, frozen, base, data, out, config, vocab, layer);
        if (*ev) return cmd_eval(scores, labels, threshold, target, roc);
        if (*sv) return cmd_serve(encoder, registry, port, vocab, host);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
