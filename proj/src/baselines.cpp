#include "mmfl/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmfl::baselines {

namespace {

using flcore::AudioModel;
using flcore::ChannelAudit;
using flcore::ClientSpec;
using flcore::ClientUpdate;
using flcore::EvalResult;
using flcore::MultimodalModel;
using flcore::ParamSet;
using flcore::StageResult;
using flcore::Topology;
using nnkit::GradResult;
using nnkit::Vec;

constexpr std::uint64_t kVisualTrainTag = 0xB1;
constexpr std::uint64_t kFusionTrainTag = 0xB2;
constexpr std::uint64_t kHarmonyVisualHeadTag = 0xB3;
constexpr std::uint64_t kHarmonyFusionHeadTag = 0xB4;
constexpr std::uint64_t kUniflAudioPoolTag = 0xB5;
constexpr std::uint64_t kUniflMultiPoolTag = 0xB6;

void finish_result(RunResult& result, const RunConfig& cfg, const MultimodalDataset& data,
                   const Topology& topo) {
    const EvalResult eval =
        flcore::evaluate_audio(flcore::build_audio_model(topo, result.audio_model), data, cfg.topk);
    std::vector<std::size_t> labels;
    for (const auto& s : data.test) labels.push_back(s.label);
    result.audio_class_report = metrics::class_f1(eval.predictions, labels, topo.num_classes);
    result.audio_class_report.dataset_hash = data.content_hash();
}

ParamSet audio_blocks_of(const ParamSet& ps) {
    ParamSet out;
    out.audio_encoder = ps.audio_encoder;
    out.audio_head = ps.audio_head;
    return out;
}

// Proportional split of the per-round budget between two cohorts, rounded,
// with a floor of 1 for any nonempty cohort.
std::pair<std::size_t, std::size_t> split_budget(std::size_t k, std::size_t n_a, std::size_t n_m) {
    const std::size_t n = n_a + n_m;
    auto k_a = static_cast<std::size_t>(
        std::llround(static_cast<double>(k) * static_cast<double>(n_a) / static_cast<double>(n)));
    k_a = std::min(k_a, n_a);
    if (n_a > 0) k_a = std::max<std::size_t>(k_a, 1);
    std::size_t k_m = k > k_a ? k - k_a : 0;
    k_m = std::min(k_m, n_m);
    if (n_m > 0) k_m = std::max<std::size_t>(k_m, 1);
    return {k_a, k_m};
}

}  // namespace

RunResult run_multifl(const RunConfig& cfg, const MultimodalDataset& data,
                      const Partition& partition, const std::vector<Modality>& modalities,
                      const ExecOptions& exec) {
    const Topology topo = flcore::make_topology(cfg, data);
    const auto clients = flcore::build_clients(partition, modalities);
    RunResult result;
    result.strategy = "multifl";
    const ParamSet initial = flcore::init_global_params(topo, cfg.seed);
    const StageResult stage1 =
        flcore::run_stage1(cfg, data, clients, initial, exec, result.audit);
    result.audio_model = audio_blocks_of(stage1.global);
    result.multimodal_model = stage1.global;
    result.history = stage1.history;
    finish_result(result, cfg, data, topo);
    return result;
}

RunResult run_unifl(const RunConfig& cfg, const MultimodalDataset& data,
                    const Partition& partition, const std::vector<Modality>& modalities,
                    const ExecOptions& exec) {
    const Topology topo = flcore::make_topology(cfg, data);
    const auto clients = flcore::build_clients(partition, modalities);
    std::vector<std::size_t> pool_a, pool_m;
    for (const auto& c : clients) {
        (c.modality == Modality::AudioOnly ? pool_a : pool_m).push_back(c.id);
    }
    if (pool_a.empty()) {
        throw std::runtime_error(
            "unifl: audio-only cohort is empty (missing_rate rounds to 0); no audio model to train");
    }

    RunResult result;
    result.strategy = "unifl";
    const ParamSet initial = flcore::init_global_params(topo, cfg.seed);
    ParamSet audio_global = audio_blocks_of(initial);
    ParamSet fusion_global;
    fusion_global.audio_encoder = initial.audio_encoder;
    fusion_global.visual_encoder = initial.visual_encoder;
    fusion_global.fusion_head = initial.fusion_head;

    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        const auto [k_a, k_m] = split_budget(cfg.clients_per_round, pool_a.size(), pool_m.size());

        const auto ids_a = flcore::sample_from_pool(pool_a, k_a, mix64(cfg.seed, kUniflAudioPoolTag),
                                                    1, round);
        std::vector<ClientUpdate> updates_a(ids_a.size());
        std::vector<ParamSet> bcast_a;
        for (std::size_t id : ids_a) {
            bcast_a.push_back(flcore::broadcast_to(clients[id], audio_global, result.audit));
        }
        flcore::parallel_for(ids_a.size(), exec.workers, [&](std::size_t i) {
            updates_a[i] = flcore::local_train_audio(bcast_a[i], clients[ids_a[i]], data, topo,
                                                     cfg, 1, round);
        });
        for (std::size_t id : ids_a) {
            if (clients[id].modality != Modality::AudioOnly) {
                result.audit.cross_cohort_audio_contributions++;
            }
        }
        audio_global =
            flcore::aggregate_stage1(audio_global, updates_a, cfg.size_weighted_aggregation);

        double loss = 0.0;
        for (const auto& u : updates_a) loss += u.train_loss;
        std::size_t n_updates = updates_a.size();

        std::optional<double> fusion_top1;
        if (k_m > 0) {
            const auto ids_m = flcore::sample_from_pool(
                pool_m, k_m, mix64(cfg.seed, kUniflMultiPoolTag), 1, round);
            std::vector<ClientUpdate> updates_m(ids_m.size());
            std::vector<ParamSet> bcast_m;
            for (std::size_t id : ids_m) {
                bcast_m.push_back(flcore::broadcast_to(clients[id], fusion_global, result.audit));
            }
            flcore::parallel_for(ids_m.size(), exec.workers, [&](std::size_t i) {
                updates_m[i] = flcore::local_train_multimodal(bcast_m[i], clients[ids_m[i]], data,
                                                              topo, cfg, 1, round);
            });
            fusion_global =
                flcore::aggregate_stage1(fusion_global, updates_m, cfg.size_weighted_aggregation);
            for (const auto& u : updates_m) loss += u.train_loss;
            n_updates += updates_m.size();
            fusion_top1 =
                flcore::evaluate_multimodal(flcore::build_multimodal_model(topo, fusion_global), data,
                                    cfg.topk)
                    .top1;
        }

        metrics::RoundMetrics m;
        m.round = round;
        m.stage = 1;
        const EvalResult ea =
            flcore::evaluate_audio(flcore::build_audio_model(topo, audio_global), data, cfg.topk);
        m.audio_top1 = ea.top1;
        m.audio_topk = ea.topk;
        m.multimodal_top1 = fusion_top1;
        m.train_loss = loss / static_cast<double>(n_updates);
        result.history.push_back(m);
    }

    result.audio_model = audio_global;
    if (!pool_m.empty()) result.multimodal_model = fusion_global;
    finish_result(result, cfg, data, topo);
    return result;
}

namespace {

// Visual unimodal classifier used only inside Harmony stage 1: the visual
// encoder with a throwaway classification head.
struct VisualClassifier {
    Vec encoder;
    Vec head;
};

VisualClassifier train_visual_on_shard(const VisualClassifier& global, const ClientSpec& client,
                                       const MultimodalDataset& data, const Topology& topo,
                                       const RunConfig& cfg, std::size_t round, double& loss_out) {
    // Reuses the AudioModel container; it is just encoder + head.
    ParamSet as_params;
    as_params.audio_encoder = global.encoder;
    as_params.audio_head = global.head;
    Topology vtopo = topo;
    vtopo.audio_dim = topo.visual_dim;
    AudioModel model = flcore::build_audio_model(vtopo, as_params);

    Rng rng(mix64(cfg.seed, std::uint64_t{1}, round, client.id, kVisualTrainTag));
    std::vector<std::size_t> order = client.shard;
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            nnkit::AudioBatch batch;
            for (std::size_t i = start; i < end; ++i) {
                batch.inputs.push_back(data.train[order[i]].visual);
                batch.labels.push_back(data.train[order[i]].label);
            }
            const GradResult g = nnkit::grad_ce(model, batch);
            Vec flat = model.to_flat();
            nnkit::sgd_step(flat, g.grad, cfg.lr);
            model.from_flat(flat);
            loss_sum += g.loss;
            ++n_batches;
        }
    }
    loss_out = n_batches > 0 ? loss_sum / static_cast<double>(n_batches) : 0.0;
    return {model.encoder.to_flat(), model.head.to_flat()};
}

void average_into(Vec& acc, const Vec& v) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

}  // namespace

RunResult run_harmony(const RunConfig& cfg, const MultimodalDataset& data,
                      const Partition& partition, const std::vector<Modality>& modalities,
                      const ExecOptions& exec) {
    const Topology topo = flcore::make_topology(cfg, data);
    const auto clients = flcore::build_clients(partition, modalities);
    std::vector<std::size_t> pool_m;
    for (const auto& c : clients) {
        if (c.modality == Modality::Multimodal) pool_m.push_back(c.id);
    }

    RunResult result;
    result.strategy = "harmony";
    const ParamSet initial = flcore::init_global_params(topo, cfg.seed);
    ParamSet audio_global = audio_blocks_of(initial);

    VisualClassifier visual_global;
    visual_global.encoder = *initial.visual_encoder;
    {
        Rng rng(mix64(cfg.seed, kHarmonyVisualHeadTag));
        visual_global.head = nnkit::make_dense_net({topo.embed_dim, topo.num_classes},
                                                   {nnkit::Activation::Identity}, rng)
                                 .to_flat();
    }

    // Stage 1: every sampled client trains the audio classifier; sampled
    // multimodal clients train the visual classifier on a separate RNG
    // stream, so nothing in the audio trajectory depends on modality
    // assignment (and hence on the missing rate).
    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        const auto sample =
            flcore::sample_round_clients(round, clients, cfg.clients_per_round, cfg.seed);
        std::vector<std::size_t> ids = sample.audio_only;
        ids.insert(ids.end(), sample.multimodal.begin(), sample.multimodal.end());
        std::sort(ids.begin(), ids.end());

        std::vector<ClientUpdate> audio_updates(ids.size());
        std::vector<VisualClassifier> visual_updates(ids.size());
        std::vector<char> has_visual(ids.size(), 0);
        flcore::parallel_for(ids.size(), exec.workers, [&](std::size_t i) {
            const ClientSpec& client = clients[ids[i]];
            audio_updates[i] =
                flcore::train_audio_on_shard(audio_global, client, data, topo, cfg, 1, round);
            if (client.modality == Modality::Multimodal) {
                double vloss = 0.0;
                visual_updates[i] =
                    train_visual_on_shard(visual_global, client, data, topo, cfg, round, vloss);
                has_visual[i] = 1;
            }
        });

        audio_global =
            flcore::aggregate_stage1(audio_global, audio_updates, cfg.size_weighted_aggregation);

        std::size_t n_visual = 0;
        Vec enc_acc(visual_global.encoder.size(), 0.0);
        Vec head_acc(visual_global.head.size(), 0.0);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!has_visual[i]) continue;
            average_into(enc_acc, visual_updates[i].encoder);
            average_into(head_acc, visual_updates[i].head);
            ++n_visual;
        }
        if (n_visual > 0) {
            for (auto& x : enc_acc) x /= static_cast<double>(n_visual);
            for (auto& x : head_acc) x /= static_cast<double>(n_visual);
            visual_global = {std::move(enc_acc), std::move(head_acc)};
        }

        metrics::RoundMetrics m;
        m.round = round;
        m.stage = 1;
        const EvalResult ea =
            flcore::evaluate_audio(flcore::build_audio_model(topo, audio_global), data, cfg.topk);
        m.audio_top1 = ea.top1;
        m.audio_topk = ea.topk;
        double loss = 0.0;
        for (const auto& u : audio_updates) loss += u.train_loss;
        m.train_loss = loss / static_cast<double>(audio_updates.size());
        result.history.push_back(m);
    }

    const double stage1_audio_top1 =
        result.history.empty() ? 0.0 : result.history.back().audio_top1;
    const double stage1_audio_topk =
        result.history.empty() ? 0.0 : result.history.back().audio_topk;

    // Stage 2: multimodal clients fine-tune the fusion model initialized
    // from the stage-1 encoders; the fusion head starts fresh.
    ParamSet fusion_global;
    fusion_global.audio_encoder = audio_global.audio_encoder;
    fusion_global.visual_encoder = visual_global.encoder;
    {
        Rng rng(mix64(cfg.seed, kHarmonyFusionHeadTag));
        fusion_global.fusion_head =
            nnkit::make_dense_net({2 * topo.embed_dim, topo.num_classes},
                                  {nnkit::Activation::Identity}, rng)
                .to_flat();
    }
    const std::size_t enc_params = fusion_global.audio_encoder->size();

    for (std::size_t round = 0; round < cfg.rounds && !pool_m.empty(); ++round) {
        const std::size_t k = std::min(cfg.clients_per_round, pool_m.size());
        const auto ids =
            flcore::sample_from_pool(pool_m, k, mix64(cfg.seed, kFusionTrainTag), 2, round);
        std::vector<ClientUpdate> updates(ids.size());
        flcore::parallel_for(ids.size(), exec.workers, [&](std::size_t i) {
            const ClientSpec& client = clients[ids[i]];
            MultimodalModel model = flcore::build_multimodal_model(topo, fusion_global);
            Rng rng(mix64(cfg.seed, std::uint64_t{2}, round, client.id, kFusionTrainTag));
            std::vector<std::size_t> order = client.shard;
            double loss_sum = 0.0;
            std::size_t n_batches = 0;
            for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
                rng.shuffle(order);
                for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
                    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
                    nnkit::MultimodalBatch batch;
                    for (std::size_t j = start; j < end; ++j) {
                        batch.audio.push_back(data.train[order[j]].audio);
                        batch.visual.push_back(data.train[order[j]].visual);
                        batch.labels.push_back(data.train[order[j]].label);
                    }
                    GradResult g = nnkit::grad_ce(model, batch);
                    if (cfg.harmony_freeze_encoders) {
                        std::fill(g.grad.begin(),
                                  g.grad.begin() + static_cast<std::ptrdiff_t>(2 * enc_params), 0.0);
                    }
                    Vec flat = model.to_flat();
                    nnkit::sgd_step(flat, g.grad, cfg.lr);
                    model.from_flat(flat);
                    loss_sum += g.loss;
                    ++n_batches;
                }
            }
            ClientUpdate up{client.id, client.shard.size(), {},
                            n_batches > 0 ? loss_sum / static_cast<double>(n_batches) : 0.0};
            flcore::store_multimodal_model(model, up.params);
            updates[i] = up;
        });
        fusion_global =
            flcore::aggregate_stage1(fusion_global, updates, cfg.size_weighted_aggregation);

        metrics::RoundMetrics m;
        m.round = round;
        m.stage = 2;
        m.audio_top1 = stage1_audio_top1;
        m.audio_topk = stage1_audio_topk;
        m.multimodal_top1 =
            flcore::evaluate_multimodal(flcore::build_multimodal_model(topo, fusion_global), data, cfg.topk)
                .top1;
        double loss = 0.0;
        for (const auto& u : updates) loss += u.train_loss;
        m.train_loss = loss / static_cast<double>(updates.size());
        result.history.push_back(m);
    }

    result.audio_model = audio_global;
    if (!pool_m.empty()) result.multimodal_model = fusion_global;
    finish_result(result, cfg, data, topo);
    return result;
}

RunResult run_strategy(const RunConfig& cfg, const MultimodalDataset& data,
                       const Partition& partition, const std::vector<Modality>& modalities,
                       const ExecOptions& exec) {
    switch (cfg.strategy) {
        case flcore::Strategy::ModalityMirror:
            return flcore::run_modality_mirror(cfg, data, partition, modalities, exec);
        case flcore::Strategy::UniFL:
            return run_unifl(cfg, data, partition, modalities, exec);
        case flcore::Strategy::MultiFL:
            return run_multifl(cfg, data, partition, modalities, exec);
        case flcore::Strategy::Harmony:
            return run_harmony(cfg, data, partition, modalities, exec);
    }
    throw std::logic_error("unknown strategy");
}

std::string strategy_name(flcore::Strategy s) {
    switch (s) {
        case flcore::Strategy::ModalityMirror: return "modality_mirror";
        case flcore::Strategy::UniFL: return "unifl";
        case flcore::Strategy::MultiFL: return "multifl";
        case flcore::Strategy::Harmony: return "harmony";
    }
    throw std::logic_error("unknown strategy");
}

flcore::Strategy parse_strategy(const std::string& name) {
    if (name == "modality_mirror") return flcore::Strategy::ModalityMirror;
    if (name == "unifl") return flcore::Strategy::UniFL;
    if (name == "multifl") return flcore::Strategy::MultiFL;
    if (name == "harmony") return flcore::Strategy::Harmony;
    throw std::invalid_argument("unknown strategy: " + name);
}

}  // namespace mmfl::baselines
