// Trains a tiny model on a generated graph and ranks its test triples.
#include <cstdio>

#include "lpbert/lpbert.hpp"

int main() {
    using namespace lpbert;
    KnowledgeGraph kg;
    kg.name = "family";
    for (const char* id : {"ann", "bob", "cid", "dee", "eve", "fay"}) kg.entities.push_back({id, id, std::string("person called ") + id});
    kg.relations.push_back({"parent_of", "parent of", false, relation_at(0)});
    auto add = [&](Split s, int h, int t) { kg.split(s).push_back({entity_at(h), relation_at(0), entity_at(t)}); };
    add(Split::train, 0, 1), add(Split::train, 0, 2), add(Split::train, 1, 3), add(Split::train, 2, 4);
    add(Split::valid, 3, 5);
    add(Split::test, 1, 5);
    kg = augment_inverse(std::move(kg));

    const Vocabulary vocab = build_vocab(kg, 1);
    EncoderConfig enc;
    enc.vocab_size = static_cast<int>(vocab.size());
    enc.hidden = 32, enc.heads = 2, enc.ff = 64, enc.max_len = 32;

    FinetuneConfig ft;
    ft.epochs = 20, ft.batch_size = 4, ft.lr_encoder = 1e-3, ft.pair_max_len = 24, ft.entity_max_len = 16;
    const auto result = run_finetune(kg, vocab, init_params<float>(enc, 1), ft);

    const TextCache text(kg, vocab);
    const auto report = evaluate<float>(kg, text, result.best, Split::test, build_filter_index(kg), {24, 16, 1});
    std::printf("best epoch %d, test queries %zu, Hits@10 %.3f, MRR %.3f\n", result.best_epoch, report.query_count(), report.hits10, report.mrr);
}
