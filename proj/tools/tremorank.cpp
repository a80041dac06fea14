// tremorank command-line tool: synth, flow, pretrain, train, eval, predict.
//
// Exit codes: 0 success, 1 internal error, 2 I/O or usage, 3 protocol violation.

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tremorank/checkpoint.hpp"
#include "tremorank/dataset.hpp"
#include "tremorank/error.hpp"
#include "tremorank/evaluation.hpp"
#include "tremorank/network.hpp"
#include "tremorank/optical_flow.hpp"
#include "tremorank/parallel.hpp"
#include "tremorank/synth.hpp"
#include "tremorank/training.hpp"

namespace fs = std::filesystem;
using namespace tremorank;
using json = nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------ run dirs

void prepare_run_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
    if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
        throw UsageError("output directory " + dir.string() + " is not empty (use --force to write into it)");
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << s;
    if (!out) throw IoError("write failed for " + p.string());
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

// Every file below `dir` with its size and FNV-1a hash.
void write_artifacts(const fs::path& dir, const std::string& command) {
    json files = json::array();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename() != "artifacts.json") paths.push_back(e.path());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
        files.push_back({{"path", fs::relative(p, dir).generic_string()},
                         {"bytes", fs::file_size(p)},
                         {"fnv1a", hex64(file_hash(p))}});
    }
    json j;
    j["command"] = command;
    j["files"] = files;
    write_text(dir / "artifacts.json", j.dump(2) + "\n");
}

// ------------------------------------------------------------ shared option groups

struct FlowArgs {
    double alpha = 1.0;
    int iterations = 100;
    std::string normalization = "fixed_scale";
    double scale = 14.0;

    void add(CLI::App* app) {
        app->add_option("--alpha", alpha, "Horn-Schunck smoothness weight")->check(CLI::PositiveNumber)->capture_default_str();
        app->add_option("--iterations", iterations, "Horn-Schunck sweeps per frame pair")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        app->add_option("--normalization", normalization, "flow tensor normalization")
            ->check(CLI::IsMember({"fixed_scale", "per_clip"}))
            ->capture_default_str();
        app->add_option("--flow-scale", scale, "factor for fixed_scale normalization")->capture_default_str();
    }
    FlowOptions options(int extent) const {
        FlowOptions o;
        o.alpha = alpha;
        o.iterations = iterations;
        o.extent = extent;
        o.normalization = normalization == "per_clip" ? FlowNormalization::per_clip : FlowNormalization::fixed_scale;
        o.scale = scale;
        return o;
    }
};

void put_flow_metadata(Checkpoint& ck, const FlowOptions& o) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", o.alpha);
    ck.metadata["flow.alpha"] = buf;
    ck.metadata["flow.iterations"] = std::to_string(o.iterations);
    ck.metadata["flow.extent"] = std::to_string(o.extent);
    ck.metadata["flow.normalization"] = o.normalization == FlowNormalization::per_clip ? "per_clip" : "fixed_scale";
    std::snprintf(buf, sizeof buf, "%.17g", o.scale);
    ck.metadata["flow.scale"] = buf;
}

FlowOptions flow_from_metadata(const Checkpoint& ck, int extent) {
    FlowOptions o;
    o.extent = extent;
    const auto get = [&](const char* k) -> std::optional<std::string> {
        const auto it = ck.metadata.find(k);
        if (it == ck.metadata.end()) return std::nullopt;
        return it->second;
    };
    if (auto v = get("flow.alpha")) o.alpha = std::stod(*v);
    if (auto v = get("flow.iterations")) o.iterations = std::stoi(*v);
    if (auto v = get("flow.normalization")) {
        o.normalization = *v == "per_clip" ? FlowNormalization::per_clip : FlowNormalization::fixed_scale;
    }
    if (auto v = get("flow.scale")) o.scale = std::stod(*v);
    return o;
}

struct SplitArgs {
    std::string corpus;
    std::string train_manifest;
    std::string test_manifest;
    double train_fraction = 2.0 / 3.0;
    std::uint64_t split_seed = 1;

    void add(CLI::App* app) {
        auto* c = app->add_option("--corpus", corpus, "corpus directory; split by subject internally");
        auto* tr = app->add_option("--train-manifest", train_manifest, "explicit training manifest");
        auto* te = app->add_option("--test-manifest", test_manifest, "explicit test manifest");
        c->excludes(tr)->excludes(te);
        tr->needs(te);
        te->needs(tr);
        app->add_option("--train-fraction", train_fraction, "share of subjects used for training")
            ->check(CLI::Range(0.0, 1.0))
            ->default_str("0.66666666666666663");
        app->add_option("--split-seed", split_seed, "seed of the subject split")->capture_default_str();
    }

    std::pair<CorpusManifest, CorpusManifest> load() const {
        if (!corpus.empty()) {
            return split_by_subject(read_manifest(fs::path(corpus) / "manifest.jsonl"), train_fraction, split_seed);
        }
        if (train_manifest.empty()) throw UsageError("give --corpus or --train-manifest with --test-manifest");
        return {read_manifest(train_manifest), read_manifest(test_manifest)};
    }
};

struct NetArgs {
    std::string arch = "reduced";
    int width = 8;

    void add(CLI::App* app) {
        app->add_option("--arch", arch, "full (2x64^3 input) or reduced (32^3 input)")
            ->check(CLI::IsMember({"full", "reduced"}))
            ->capture_default_str();
        app->add_option("--width", width, "first block width of the reduced network")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
    }
    // Levels come from the corpus manifest.
    NetConfig config(int levels) const { return arch == "full" ? NetConfig::full(levels) : NetConfig::reduced(width, levels); }
};

struct TrainArgs {
    double lr = 1e-2;
    int epochs = 60;
    std::size_t batch = 8;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
    int log_every = 1;
    bool no_task_weighting = false;

    void add(CLI::App* app) {
        app->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
        app->add_option("--epochs", epochs, "training epochs")->check(CLI::PositiveNumber)->capture_default_str();
        app->add_option("--batch", batch, "batch size")->check(CLI::PositiveNumber)->capture_default_str();
        app->add_option("--seed", seed, "initialization and shuffling seed")->capture_default_str();
        app->add_option("--weight-decay", weight_decay, "L2 penalty")->capture_default_str();
        app->add_option("--log-every", log_every, "evaluate train/test MSE every N epochs")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        app->add_flag("--no-task-weighting", no_task_weighting, "use uniform task weights");
    }
    TrainConfig config(const NetConfig& net) const {
        TrainConfig c;
        c.net = net;
        c.learning_rate = lr;
        c.epochs = epochs;
        c.batch_size = batch;
        c.seed = seed;
        c.weight_decay = weight_decay;
        c.log_every = log_every;
        c.task_weighting = !no_task_weighting;
        return c;
    }
};

std::shared_ptr<TensorProvider> make_provider(const FlowOptions& o, const std::string& cache) {
    if (cache.empty()) return std::make_shared<TensorProvider>(o);
    return std::make_shared<TensorProvider>(o, fs::absolute(cache));
}

bool is_path_option(const std::string& name) {
    static const std::set<std::string> paths{"out",   "corpus", "train-manifest", "test-manifest", "cache",
                                             "pretrained", "model", "manifest", "clip"};
    return paths.count(name) > 0;
}

std::string toml_value(const std::string& v, bool path) {
    if (path) return json(v.empty() ? v : fs::absolute(v).string()).dump();
    if (v == "true" || v == "false") return v;
    char* end = nullptr;
    std::strtod(v.c_str(), &end);
    if (!v.empty() && end && *end == '\0') return v;
    return json(v).dump();
}

// Resolved options of the command that ran, re-loadable with --config.
std::string resolved_config(const CLI::App& app, const CLI::App& sub) {
    std::string s = "# resolved configuration\n";
    const auto dump = [&](const CLI::App& a) {
        for (const CLI::Option* o : a.get_options()) {
            const std::string name = o->get_single_name();
            if (name.empty() || name == "help" || name == "config") continue;
            std::vector<std::string> vals = o->results();
            if (vals.empty()) {
                if (o->get_expected_min() == 0) {
                    vals = {"false"};
                } else if (!o->get_default_str().empty()) {
                    vals = {o->get_default_str()};
                }
            }
            if (vals.empty()) continue;
            std::string line = name + " = ";
            const bool path = is_path_option(name);
            if (vals.size() == 1 && o->get_expected_max() <= 1) {
                line += toml_value(vals[0], path);
            } else {
                line += "[";
                for (std::size_t i = 0; i < vals.size(); ++i) line += (i ? ", " : "") + toml_value(vals[i], path);
                line += "]";
            }
            s += line + "\n";
        }
    };
    dump(app);
    s += "\n[" + sub.get_name() + "]\n";
    dump(sub);
    return s;
}

std::string abs_or_empty(const std::string& p) { return p.empty() ? p : fs::absolute(p).string(); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tremorank: ordinal tremor severity from optical flow"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML-style key = value file; command-line flags take precedence");
    app.allow_config_extras(CLI::config_extras_mode::error);
    std::size_t threads = 0;
    app.add_option("--threads", threads, "worker threads (results do not depend on it)")
        ->envname("TREMORANK_THREADS")
        ->check(CLI::PositiveNumber);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    CorpusOptions co;
    std::string profile = "imbalanced", synth_out;
    bool force = false;
    double amp_per_rank = co.amplitude.pixels_per_rank;
    synth->add_option("--subjects", co.n_subjects, "number of subjects")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--clips-per-subject", co.clips_per_subject, "clips per subject")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    synth->add_option("--profile", profile, "rank histogram profile")
        ->check(CLI::IsMember({"uniform", "imbalanced"}))
        ->capture_default_str();
    synth->add_option("--seed", co.master_seed, "master seed")->capture_default_str();
    synth->add_option("--levels", co.levels, "ordinal levels")->check(CLI::Range(2, 64))->capture_default_str();
    synth->add_option("--frames", co.frames_per_clip, "frames per clip")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--fps", co.fps, "frame rate")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--canvas", co.canvas, "frame side in pixels")->check(CLI::Range(8, 4096))->capture_default_str();
    synth->add_option("--noise", co.noise_sigma, "pixel noise sigma")->capture_default_str();
    synth->add_option("--amplitude-per-rank", amp_per_rank, "oscillation amplitude per rank, pixels")->capture_default_str();
    synth->add_option("--min-sigma", co.min_sigma, "smallest blob sigma")->capture_default_str();
    synth->add_option("--max-sigma", co.max_sigma, "largest blob sigma")->capture_default_str();
    synth->add_option("-o,--out", synth_out, "output corpus directory")->required();
    synth->add_flag("--force", force, "write into a non-empty directory");

    // flow
    auto* flow = app.add_subcommand("flow", "optical flow visualizations and tensors for one clip");
    std::string flow_clip, flow_out;
    FlowArgs flow_args;
    int flow_pairs = 0, flow_extent = 32;
    bool flow_tensor = false;
    flow->add_option("clip", flow_clip, "clip container (.trcl)")->required();
    flow->add_option("-o,--out", flow_out, "output directory")->required();
    flow->add_option("--pairs", flow_pairs, "visualize the first N frame pairs (0 = all)")->capture_default_str();
    flow->add_flag("--tensor", flow_tensor, "also write the network input tensor");
    flow->add_option("--extent", flow_extent, "tensor extent")->check(CLI::PositiveNumber)->capture_default_str();
    flow->add_flag("--force", force, "write into a non-empty directory");
    flow_args.add(flow);

    // pretrain / train share most options
    auto* pretrain = app.add_subcommand("pretrain", "frequency-classification pretraining of the encoder");
    auto* train = app.add_subcommand("train", "ordinal training");
    SplitArgs split_args;
    NetArgs net_args;
    TrainArgs train_args;
    FlowArgs train_flow;
    std::string run_out, cache, pretrained, transfer = "none";
    int bins = 4;
    for (auto* sub : {pretrain, train}) {
        split_args.add(sub);
        net_args.add(sub);
        train_args.add(sub);
        train_flow.add(sub);
        sub->add_option("--cache", cache, "flow tensor cache directory");
        sub->add_option("-o,--out", run_out, "run directory")->required();
        sub->add_flag("--force", force, "write into a non-empty directory");
    }
    pretrain->add_option("--bins", bins, "frequency bins")->check(CLI::Range(2, 64))->capture_default_str();
    train->add_option("--pretrained", pretrained, "encoder checkpoint from pretrain");
    train->add_option("--transfer", transfer, "use of the pretrained encoder")
        ->check(CLI::IsMember({"none", "freeze", "finetune"}))
        ->capture_default_str();

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
    std::string model, eval_manifest, eval_train_manifest;
    std::size_t eval_batch = 8;
    eval->add_option("--model", model, "checkpoint")->required();
    eval->add_option("--manifest", eval_manifest, "manifest of the evaluation clips")->required();
    eval->add_option("--train-manifest", eval_train_manifest, "training manifest, checked for subject overlap");
    eval->add_option("--cache", cache, "flow tensor cache directory");
    eval->add_option("--batch", eval_batch, "inference batch size")->check(CLI::PositiveNumber)->capture_default_str();
    eval->add_option("-o,--out", run_out, "run directory")->required();
    eval->add_flag("--force", force, "write into a non-empty directory");

    // predict
    auto* pred = app.add_subcommand("predict", "per-clip severity and per-group overall score");
    std::string pred_manifest, group_by = "subject";
    std::vector<std::string> pred_clips;
    pred->add_option("--model", model, "checkpoint")->required();
    auto* pm = pred->add_option("--manifest", pred_manifest, "manifest of clips to score");
    auto* pc = pred->add_option("--clip", pred_clips, "clip container(s) to score");
    pm->excludes(pc);
    pred->add_option("--group-by", group_by, "subject: one overall score per subject; all: one for every clip")
        ->check(CLI::IsMember({"subject", "all"}))
        ->capture_default_str();
    pred->add_option("--cache", cache, "flow tensor cache directory");
    pred->add_option("-o,--out", run_out, "run directory (optional)");
    pred->add_flag("--force", force, "write into a non-empty directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    // Resolve every path up front so the recorded configuration is unambiguous.
    for (std::string* p : {&synth_out, &flow_clip, &flow_out, &split_args.corpus, &split_args.train_manifest,
                           &split_args.test_manifest, &run_out, &cache, &pretrained, &model, &eval_manifest,
                           &eval_train_manifest, &pred_manifest}) {
        *p = abs_or_empty(*p);
    }
    for (auto& c : pred_clips) c = abs_or_empty(c);

    try {
        if (threads > 0) set_thread_count(threads);
        const CLI::App* active = app.get_subcommands().front();
        const auto record_config = [&](const fs::path& dir) {
            write_text(dir / "resolved_config.toml", resolved_config(app, *active));
        };

        if (synth->parsed()) {
            const fs::path out = fs::absolute(synth_out);
            prepare_run_dir(out, force);
            co.profile = profile == "uniform" ? HistogramProfile::uniform : HistogramProfile::imbalanced;
            co.amplitude.pixels_per_rank = amp_per_rank;
            const auto m = generate_corpus(co, out);
            record_config(out);
            write_artifacts(out, "synth");
            const auto hist = m.histogram();
            std::printf("corpus %s: %zu subjects, %zu clips, manifest %s\n", out.c_str(), m.subjects().size(),
                        m.clips.size(), hex64(file_hash(out / "manifest.jsonl")).c_str());
            std::printf("histogram:");
            for (std::size_t r = 0; r < hist.size(); ++r) std::printf(" %zu:%d", r, hist[r]);
            std::printf("\n");
        } else if (flow->parsed()) {
            const auto clip = read_clip(flow_clip);
            const fs::path out = fs::absolute(flow_out);
            prepare_run_dir(out, force);
            const int n = clip.frames.size() < 2 ? 0 : static_cast<int>(clip.frames.size()) - 1;
            const int pairs = flow_pairs > 0 ? std::min(flow_pairs, n) : n;
            std::string stats = "pair,u_min,u_max,v_min,v_max,green_var,blue_var\n";
            for (int t = 0; t < pairs; ++t) {
                const auto f = horn_schunck(clip.frames[t], clip.frames[t + 1], flow_args.alpha, flow_args.iterations);
                const auto img = flow_to_rgb(f);
                const auto rgb = img.to_rgb8();
                char name[32];
                std::snprintf(name, sizeof name, "flow_%04d.ppm", t);
                write_ppm(out / name, img.width, img.height, rgb);
                const auto var = [](const std::vector<double>& x) {
                    double m = 0, q = 0;
                    for (double v : x) m += v;
                    m /= static_cast<double>(x.size());
                    for (double v : x) q += (v - m) * (v - m);
                    return q / static_cast<double>(x.size());
                };
                char line[256];
                std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", t, img.u_min, img.u_max,
                              img.v_min, img.v_max, var(img.green), var(img.blue));
                stats += line;
            }
            write_text(out / "flow_stats.csv", stats);
            if (flow_tensor) {
                const auto opts = flow_args.options(flow_extent);
                const auto t = clip_to_tensor(clip.frames, opts);
                Checkpoint ck;
                ck.metadata["kind"] = "flow_tensor";
                ck.metadata["clip"] = fs::absolute(flow_clip).string();
                put_flow_metadata(ck, opts);
                const auto e = static_cast<std::uint32_t>(opts.extent);
                ck.tensors.push_back({"flow", {2, e, e, e}, t.values});
                save_checkpoint(ck, out / "tensor.trnk");
            }
            record_config(out);
            write_artifacts(out, "flow");
            std::printf("wrote %d flow visualizations to %s\n", pairs, out.c_str());
        } else if (pretrain->parsed() || train->parsed()) {
            const bool is_pre = pretrain->parsed();
            auto [tr, te] = split_args.load();
            const fs::path out = fs::absolute(run_out);
            require_disjoint(tr, te);
            prepare_run_dir(out, force);
            // The split manifests live in the run directory, so their clip paths are made absolute.
            for (auto* m : {&tr, &te}) {
                for (auto& c : m->clips) c.path = m->clip_path(c).string();
            }
            write_manifest(tr, out / "train_manifest.jsonl");
            write_manifest(te, out / "test_manifest.jsonl");
            const auto net = net_args.config(tr.levels);
            const auto fo = train_flow.options(net.input_extent);
            auto provider = make_provider(fo, cache);
            const auto tc = train_args.config(net);
            record_config(out);
            if (is_pre) {
                auto res = pretrain_frequency(tr, te, tc, bins, provider, [](int e, double loss) {
                    std::fprintf(stderr, "pretrain epoch %d loss %.4f\n", e, loss);
                });
                put_flow_metadata(res.encoder, fo);
                save_checkpoint(res.encoder, out / "encoder.trnk");
                std::string log = "epoch,train_loss\n";
                for (std::size_t i = 0; i < res.train_loss.size(); ++i) {
                    char line[64];
                    std::snprintf(line, sizeof line, "%zu,%.17g\n", i + 1, res.train_loss[i]);
                    log += line;
                }
                write_text(out / "pretrain_log.csv", log);
                std::printf("encoder %s, held-out frequency accuracy %.4f\n", (out / "encoder.trnk").c_str(),
                            res.heldout_accuracy);
            } else {
                auto cfg = tc;
                cfg.transfer = parse_transfer_policy(transfer);
                std::optional<Checkpoint> pre;
                if (cfg.transfer != TransferPolicy::none) {
                    if (pretrained.empty()) throw UsageError("--transfer " + transfer + " needs --pretrained");
                    pre = load_checkpoint(pretrained);
                }
                const auto res = train_ordinal(tr, te, cfg, provider, pre ? &*pre : nullptr, [](const EpochRecord& e) {
                    std::fprintf(stderr, "epoch %d loss %.4f train mse %.4f test mse %.4f (%.1fs)\n", e.epoch,
                                 e.train_loss, e.train_mse, e.test_mse, e.seconds);
                });
                auto best = res.best_checkpoint(), last = res.final_checkpoint();
                put_flow_metadata(best, fo);
                put_flow_metadata(last, fo);
                save_checkpoint(best, out / "best.trnk");
                save_checkpoint(last, out / "final.trnk");
                write_text(out / "train_log.csv", res.log.to_csv());
                write_text(out / "train_log.json", res.log.to_json());
                if (res.transfer) write_text(out / "transfer.txt", res.transfer->str());
                std::printf("best epoch %d (test mse %.4f); checkpoints in %s\n", res.best_epoch, res.best_test_mse,
                            out.c_str());
            }
            write_artifacts(out, is_pre ? "pretrain" : "train");
        } else if (eval->parsed()) {
            const auto ck = load_checkpoint(model);
            const auto params = from_checkpoint(ck);
            const auto m = read_manifest(eval_manifest);
            if (!eval_train_manifest.empty()) require_disjoint(read_manifest(eval_train_manifest), m);
            const fs::path out = fs::absolute(run_out);
            prepare_run_dir(out, force);
            auto provider = make_provider(flow_from_metadata(ck, params.config.input_extent), cache);
            const auto preds = predict(params, m, *provider, eval_batch);
            const auto rep = evaluate_predictions(preds, RankScale(params.config.levels, params.config.score_step));
            write_text(out / "report.json", rep.to_json());
            write_text(out / "report.txt", rep.to_text());
            write_text(out / "correlation.csv", correlation_csv(rep.correlation));
            std::string csv = "clip,subject,true_rank,predicted_rank,tremor_probability\n";
            for (const auto& p : preds) {
                char line[512];
                std::snprintf(line, sizeof line, "%s,%d,%d,%d,%.9g\n", p.clip.c_str(), p.subject, p.true_rank,
                              p.predicted_rank, p.tremor_probability);
                csv += line;
            }
            write_text(out / "predictions.csv", csv);
            record_config(out);
            write_artifacts(out, "eval");
            std::fputs(rep.to_text().c_str(), stdout);
        } else if (pred->parsed()) {
            const auto ck = load_checkpoint(model);
            const auto params = from_checkpoint(ck);
            const RankScale scale(params.config.levels, params.config.score_step);
            CorpusManifest m;
            if (!pred_manifest.empty()) {
                m = read_manifest(pred_manifest);
            } else if (!pred_clips.empty()) {
                m.levels = scale.levels;
                for (const auto& c : pred_clips) {
                    ClipRecord r;
                    r.path = fs::absolute(c).string();
                    r.spec_hash = file_hash(r.path);  // cache key for loose clips
                    m.clips.push_back(r);
                }
            } else {
                throw UsageError("give --manifest or --clip");
            }
            auto provider = make_provider(flow_from_metadata(ck, params.config.input_extent), cache);
            const auto preds = predict(params, m, *provider);
            std::map<int, std::vector<ClipPrediction>> groups;
            std::string csv = "clip,subject,predicted_rank,score,tremor_probability\n";
            std::printf("%-40s %7s %5s %6s %11s\n", "clip", "subject", "rank", "score", "probability");
            for (const auto& p : preds) {
                const double score = scale.score_of_rank(p.predicted_rank);
                std::printf("%-40s %7d %5d %6.1f %11.4f\n", p.clip.c_str(), p.subject, p.predicted_rank, score,
                            p.tremor_probability);
                char line[512];
                std::snprintf(line, sizeof line, "%s,%d,%d,%.1f,%.9g\n", p.clip.c_str(), p.subject, p.predicted_rank,
                              score, p.tremor_probability);
                csv += line;
                groups[group_by == "all" ? -1 : p.subject].push_back(p);
            }
            std::string gcsv = "group,clips,overall_score\n";
            for (const auto& [g, ps] : groups) {
                const double s = overall_score(ps, scale);
                const std::string name = g < 0 ? "all" : "subject " + std::to_string(g);
                std::printf("%s: %zu clips, overall score %.1f\n", name.c_str(), ps.size(), s);
                char line[96];
                std::snprintf(line, sizeof line, "%s,%zu,%.1f\n", g < 0 ? "all" : std::to_string(g).c_str(),
                              ps.size(), s);
                gcsv += line;
            }
            if (!run_out.empty()) {
                const fs::path out = fs::absolute(run_out);
                prepare_run_dir(out, force);
                write_text(out / "predictions.csv", csv);
                write_text(out / "groups.csv", gcsv);
                record_config(out);
                write_artifacts(out, "predict");
            }
        }
    } catch (const ProtocolError& e) {
        std::fprintf(stderr, "protocol violation: %s\n", e.what());
        return 3;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage: %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 2;
    } catch (const DomainError& e) {
        std::fprintf(stderr, "invalid argument: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 0;
}
