#include <gtest/gtest.h>
#include <sys/wait.h>

#include <sstream>

#include "lpbert/commands.hpp"
#include "support.hpp"

using namespace lpbert;
using lpbert::testing::TempDir;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an lpbert::Error";
    return ErrorKind::runtime;
}

struct CliRun {
    int code = -1;
    std::string output;
};

CliRun run_cli(const std::string& args, const fs::path& scratch) {
    const fs::path log = scratch / "cli.log";
    const std::string cmd = "'" + std::string(LPBERT_CLI) + "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file_bytes(log)};
}

/// Tiny model and one epoch per stage, so a full pipeline runs in about a second.
GlobalOptions tiny_options(const fs::path& out) {
    GlobalOptions g;
    g.out = out;
    g.seed = 5;
    g.overrides = {{"encoder.hidden", "16"},       {"encoder.layers", "1"},         {"encoder.heads", "2"},
                   {"encoder.ff", "24"},           {"pretrain.epochs", "1"},        {"pretrain.max_len", "32"},
                   {"finetune.epochs", "1"},       {"finetune.batch_size", "16"},   {"finetune.pair_max_len", "24"},
                   {"finetune.entity_max_len", "16"}};
    return g;
}

fs::path write_toy_dataset(const fs::path& dir) {
    save_dataset(lpbert::testing::random_kg(30, 3, 0.3, 17), dir);
    return dir;
}

}  // namespace

TEST(Config, NestedMappingsFlattenToDottedKeys) {
    const auto kv = parse_config_text("# top\nrun:\n  seed: 3\nfinetune:\n  alpha: 0.25   # trailing\nencoder: {layers: 4}\n");
    EXPECT_EQ(kv.at("run.seed"), "3");
    EXPECT_EQ(kv.at("finetune.alpha"), "0.25");
    EXPECT_EQ(kv.at("encoder.layers"), "4");
    EXPECT_EQ(kv.size(), 3u);
    EXPECT_TRUE(parse_config_text("# only a comment\n").empty());
}

TEST(Config, MalformedInputIsUsageError) {
    EXPECT_EQ(kind_of([] { parse_config_text("finetune: [alpha\n"); }), ErrorKind::usage);
    EXPECT_EQ(kind_of([] { parse_config_text("just words\n"); }), ErrorKind::usage);
    EXPECT_EQ(kind_of([] { parse_config_text("finetune:\n  alpha: [1, 2]\n"); }), ErrorKind::usage);
    EXPECT_EQ(kind_of([] { parse_config_text("finetune.alpha: 1\nfinetune:\n  alpha: 2\n"); }), ErrorKind::usage);
    EXPECT_EQ(kind_of([] { resolve_config({{"finetune.alpah", "0.5"}}, {}); }), ErrorKind::usage);
    EXPECT_EQ(kind_of([] { resolve_config({{"finetune.alpha", "half"}}, {}); }), ErrorKind::usage);
    EXPECT_EQ(kind_of([] { resolve_config({{"finetune.negatives", "hard"}}, {}); }), ErrorKind::usage);
}

TEST(Config, DatasetDefaultsFollowDirectoryName) {
    const auto wn = resolve_config({{"dataset.path", "/data/WN18RR"}}, {});
    EXPECT_EQ(wn.finetune.batch_size, 64);
    EXPECT_EQ(wn.finetune.epochs, 7);
    EXPECT_DOUBLE_EQ(wn.finetune.focal.alpha, 0.8);
    EXPECT_DOUBLE_EQ(wn.finetune.focal.gamma, 2.0);
    const auto fb = resolve_config({{"dataset.path", "/data/fb15k-237"}}, {});
    EXPECT_EQ(fb.finetune.batch_size, 120);
    EXPECT_DOUBLE_EQ(fb.finetune.focal.alpha, 0.5);
    const auto umls = resolve_config({{"dataset.path", "/data/umls"}}, {});
    EXPECT_EQ(umls.finetune.batch_size, 128);
    EXPECT_EQ(umls.finetune.epochs, 30);
}

TEST(Config, FlagsOverrideFileOverrideDefaults) {
    const auto c = resolve_config({{"dataset.path", "/data/fb15k-237"}, {"finetune.alpha", "0.3"}, {"finetune.batch_size", "10"}},
                                  {{"finetune.batch_size", "12"}, {"run.seed", "9"}});
    EXPECT_DOUBLE_EQ(c.finetune.focal.alpha, 0.3);
    EXPECT_EQ(c.finetune.batch_size, 12);
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.finetune.seed, 9u);
    EXPECT_EQ(c.pretrain.seed, 9u);
}

TEST(Config, ExampleConfigLoads) {
    const auto c = resolve_config(load_config_file(fs::path(LPBERT_SOURCE_DIR) / "configs" / "umls.yaml"), {});
    EXPECT_EQ(c.dataset_name, "umls");
    EXPECT_EQ(c.finetune.batch_size, 128);
    EXPECT_EQ(c.encoder.hidden, 128);
}

TEST(Manifest, GitBlobHashMatchesKnownValues) {
    // `printf '' | git hash-object --stdin` and `printf 'hello\n' | git hash-object --stdin`
    EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(Cli, UsageErrorsExitWithTwo) {
    TempDir tmp("cli_usage");
    EXPECT_EQ(run_cli("ingest " + (tmp.path() / "nope").string() + " --out " + (tmp.path() / "o").string(), tmp.path()).code, 2);
    EXPECT_EQ(run_cli("frobnicate", tmp.path()).code, 2);
    EXPECT_EQ(run_cli("evaluate --split train --out " + tmp.path().string(), tmp.path()).code, 2);
    const auto r = run_cli("--set finetune.alpah=1 ingest " + (tmp.path() / "nope").string(), tmp.path());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("finetune.alpah"), std::string::npos) << r.output;
}

TEST(Cli, MissingArtifactsNameTheProducingCommand) {
    TempDir tmp("cli_missing");
    auto r = run_cli("--out " + (tmp.path() / "ws").string() + " pretrain", tmp.path());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find("run `lpbert ingest` first"), std::string::npos) << r.output;

    const auto ws = tmp.path() / "ws2";
    std::ostringstream sink;
    cmd_ingest(tiny_options(ws), write_toy_dataset(tmp.path() / "toy"), sink);
    r = run_cli("--out " + ws.string() + " evaluate", tmp.path());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find("run `lpbert finetune` first"), std::string::npos) << r.output;
    r = run_cli("--out " + ws.string() + " finetune", tmp.path());
    EXPECT_NE(r.output.find("run `lpbert pretrain` first"), std::string::npos) << r.output;
}

TEST(Cli, IngestRefusesNonEmptyOutputWithoutForce) {
    TempDir tmp("cli_force");
    const auto data = write_toy_dataset(tmp.path() / "toy");
    const auto ws = tmp.path() / "ws";
    EXPECT_EQ(run_cli("--out " + ws.string() + " ingest " + data.string(), tmp.path()).code, 0);
    const auto again = run_cli("--out " + ws.string() + " ingest " + data.string(), tmp.path());
    EXPECT_EQ(again.code, 2);
    EXPECT_NE(again.output.find("--force"), std::string::npos);
    EXPECT_EQ(run_cli("--force --out " + ws.string() + " ingest " + data.string(), tmp.path()).code, 0);
}

TEST(Cli, IngestPrintsUmlsStatistics) {
    const auto dir = lpbert::testing::data_root() / "umls";
    if (!fs::is_directory(dir)) GTEST_SKIP() << "UMLS not present under " << dir;
    TempDir tmp("cli_umls");
    const auto r = run_cli("--out " + (tmp.path() / "ws").string() + " ingest " + dir.string(), tmp.path());
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* col : {"#Ent", "#Rel", "#Train", "#Dev", "#Test"}) EXPECT_NE(r.output.find(col), std::string::npos);
    std::istringstream rows(r.output.substr(r.output.find("umls")));
    std::string name;
    std::size_t e, rel, tr, va, te;
    rows >> name >> e >> rel >> tr >> va >> te;
    EXPECT_EQ(std::vector<std::size_t>({e, rel, tr, va, te}), std::vector<std::size_t>({135, 46, 5216, 652, 661}));
}

TEST(Cli, ResplitNeedsOut) {
    TempDir tmp("cli_resplit");
    const auto data = write_toy_dataset(tmp.path() / "toy");
    EXPECT_EQ(run_cli("resplit-unseen " + data.string(), tmp.path()).code, 2);
    EXPECT_EQ(run_cli("--out " + (tmp.path() / "unseen").string() + " resplit-unseen " + data.string(), tmp.path()).code, 0);
    const auto kg = load_dataset(tmp.path() / "unseen");
    std::set<EntityId> train;
    for (const auto& t : kg.split(Split::train)) train.insert({t.head, t.tail});
    for (const auto& t : kg.split(Split::test)) EXPECT_TRUE(!train.contains(t.head) || !train.contains(t.tail));
}

class Pipeline : public ::testing::Test {
protected:
    static void run_all(const fs::path& data, const fs::path& ws) {
        std::ostringstream sink;
        const auto g = tiny_options(ws);
        cmd_ingest(g, data, sink);
        cmd_pretrain(g, sink);
        cmd_finetune(g, {}, sink);
        cmd_evaluate(g, {Split::test, std::nullopt}, sink);
        cmd_evaluate(g, {Split::valid, std::nullopt}, sink);
    }
};

TEST_F(Pipeline, ArtifactsReportsAndDeterminism) {
    TempDir tmp("pipeline");
    const auto data = write_toy_dataset(tmp.path() / "toy");
    run_all(data, tmp.path() / "a");
    run_all(data, tmp.path() / "b");
    for (const char* f : {"ingest.json", "vocab.txt", "entities.tsv", "relations.tsv", "pretrain.ckpt", "finetune.ckpt", "entity_table.bin",
                          "pretrain_log.jsonl", "manifest_pretrain.json", "manifest_finetune.json", "manifest_evaluate_test.json"})
        EXPECT_TRUE(fs::is_regular_file(tmp.path() / "a" / f)) << f;

    const auto test = nlohmann::json::parse(read_file_bytes(tmp.path() / "a" / "report_test.json"));
    const auto valid = nlohmann::json::parse(read_file_bytes(tmp.path() / "a" / "report_valid.json"));
    EXPECT_EQ(test.at("split"), "test");
    EXPECT_EQ(valid.at("split"), "valid");
    const auto raw = load_dataset(data);
    EXPECT_EQ(test.at("n_queries").get<std::size_t>(), 2 * raw.split(Split::test).size());
    EXPECT_EQ(valid.at("n_queries").get<std::size_t>(), 2 * raw.split(Split::valid).size());

    EXPECT_EQ(read_file_bytes(tmp.path() / "a" / "report_test.json"), read_file_bytes(tmp.path() / "b" / "report_test.json"));
    EXPECT_EQ(read_file_bytes(tmp.path() / "a" / "finetune.ckpt"), read_file_bytes(tmp.path() / "b" / "finetune.ckpt"));

    const auto manifest = nlohmann::json::parse(read_file_bytes(tmp.path() / "a" / "manifest_evaluate_test.json"));
    const auto ckpt = (tmp.path() / "a" / "finetune.ckpt").string();
    EXPECT_EQ(manifest.at("inputs").at(ckpt), git_blob_hash_file(ckpt));
}

TEST_F(Pipeline, PredictHandlesLargeKFiltersAndFreeText) {
    TempDir tmp("predict");
    const auto data = write_toy_dataset(tmp.path() / "toy");
    const auto ws = tmp.path() / "ws";
    run_all(data, ws);
    const auto g = tiny_options(ws);
    const auto raw = load_dataset(data);
    std::ostringstream sink;

    PredictCommandOptions o;
    o.head = raw.entities[0].identifier;
    o.relation = raw.relations[0].identifier;
    o.k = 1000;
    const auto all = cmd_predict(g, o, sink);
    EXPECT_EQ(all.size(), raw.entity_count());
    for (std::size_t i = 1; i < all.size(); ++i) EXPECT_GE(all[i - 1].score, all[i].score);

    o.filtered = true;
    const auto kg = augment_inverse(raw);
    const auto filter = build_filter_index(kg);
    const auto known = filter.lookup(entity_at(0), relation_at(0));
    const auto filtered = cmd_predict(g, o, sink);
    EXPECT_EQ(filtered.size(), raw.entity_count() - known.size());
    for (const auto& p : filtered)
        for (auto k : known) EXPECT_NE(p.entity, raw.entities[index_of(k)].identifier);

    o.filtered = false;
    o.head = "a brand new thing";
    o.k = 3;
    const auto free_text = cmd_predict(g, o, sink);
    EXPECT_EQ(free_text.size(), 3u);
    EXPECT_NE(sink.str().find("free text"), std::string::npos);

    o.relation = "no_such_relation";
    EXPECT_EQ(kind_of([&] { cmd_predict(g, o, sink); }), ErrorKind::usage);
}

TEST_F(Pipeline, FinetuneFromScratchSkipsPretraining) {
    TempDir tmp("scratch");
    const auto data = write_toy_dataset(tmp.path() / "toy");
    const auto ws = tmp.path() / "ws";
    std::ostringstream sink;
    const auto g = tiny_options(ws);
    cmd_ingest(g, data, sink);
    FinetuneCommandOptions o;
    o.from_scratch = true;
    cmd_finetune(g, o, sink);
    EXPECT_TRUE(fs::is_regular_file(ws / "finetune.ckpt"));
    EXPECT_FALSE(fs::exists(ws / "pretrain.ckpt"));
}
