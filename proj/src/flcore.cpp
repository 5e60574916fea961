#include "mmfl/flcore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace mmfl::flcore {

namespace {

using nnkit::Activation;
using nnkit::AudioBatch;
using nnkit::DenseNet;
using nnkit::GradResult;
using nnkit::MultimodalBatch;

constexpr std::uint64_t kInitTag = 0xA1;
constexpr std::uint64_t kSampleTag = 0xA2;
constexpr std::uint64_t kTrainTag = 0xA3;
constexpr std::uint64_t kColdStartTag = 0xA5;

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

DenseNet make_encoder(std::size_t in, const Topology& topo, Rng& rng) {
    return nnkit::make_dense_net({in, topo.hidden_dim, topo.embed_dim},
                                 {Activation::Relu, Activation::Identity}, rng);
}

DenseNet make_head(std::size_t in, std::size_t classes, Rng& rng) {
    return nnkit::make_dense_net({in, classes}, {Activation::Identity}, rng);
}

std::vector<std::size_t> batch_of(const std::vector<std::size_t>& order, std::size_t start,
                                  std::size_t batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    return {order.begin() + static_cast<std::ptrdiff_t>(start),
            order.begin() + static_cast<std::ptrdiff_t>(end)};
}

}  // namespace

Topology make_topology(const RunConfig& cfg, const MultimodalDataset& data) {
    return {data.spec.audio_dim, data.spec.visual_dim, cfg.hidden_dim, cfg.embed_dim,
            data.spec.num_classes};
}

std::vector<ClientSpec> build_clients(const Partition& partition,
                                      const std::vector<Modality>& modalities) {
    require(partition.shards.size() == modalities.size(),
            "partition/modality client count mismatch");
    std::vector<ClientSpec> clients;
    for (std::size_t i = 0; i < partition.shards.size(); ++i) {
        clients.push_back({i, modalities[i], partition.shards[i]});
    }
    return clients;
}

ParamSet init_global_params(const Topology& topo, std::uint64_t seed) {
    ParamSet ps;
    // One stream per block: the audio init bytes are independent of the
    // visual topology.
    Rng r0(mix64(seed, kInitTag, std::uint64_t{0}));
    ps.audio_encoder = make_encoder(topo.audio_dim, topo, r0).to_flat();
    Rng r1(mix64(seed, kInitTag, std::uint64_t{1}));
    ps.visual_encoder = make_encoder(topo.visual_dim, topo, r1).to_flat();
    Rng r2(mix64(seed, kInitTag, std::uint64_t{2}));
    ps.audio_head = make_head(topo.embed_dim, topo.num_classes, r2).to_flat();
    Rng r3(mix64(seed, kInitTag, std::uint64_t{3}));
    ps.fusion_head = make_head(2 * topo.embed_dim, topo.num_classes, r3).to_flat();
    return ps;
}

AudioModel build_audio_model(const Topology& topo, const ParamSet& params) {
    require(params.audio_encoder && params.audio_head, "missing audio blocks");
    Rng dummy(0);
    AudioModel m;
    m.encoder = make_encoder(topo.audio_dim, topo, dummy);
    m.head = make_head(topo.embed_dim, topo.num_classes, dummy);
    m.encoder.from_flat(*params.audio_encoder);
    m.head.from_flat(*params.audio_head);
    return m;
}

MultimodalModel build_multimodal_model(const Topology& topo, const ParamSet& params) {
    require(params.audio_encoder && params.visual_encoder && params.fusion_head,
            "missing multimodal blocks");
    Rng dummy(0);
    MultimodalModel m;
    m.audio_encoder = make_encoder(topo.audio_dim, topo, dummy);
    m.visual_encoder = make_encoder(topo.visual_dim, topo, dummy);
    m.fusion_head = make_head(2 * topo.embed_dim, topo.num_classes, dummy);
    m.audio_encoder.from_flat(*params.audio_encoder);
    m.visual_encoder.from_flat(*params.visual_encoder);
    m.fusion_head.from_flat(*params.fusion_head);
    return m;
}

void store_audio_model(const AudioModel& model, ParamSet& params) {
    params.audio_encoder = model.encoder.to_flat();
    params.audio_head = model.head.to_flat();
}

void store_multimodal_model(const MultimodalModel& model, ParamSet& params) {
    params.audio_encoder = model.audio_encoder.to_flat();
    params.visual_encoder = model.visual_encoder.to_flat();
    params.fusion_head = model.fusion_head.to_flat();
}

ParamSet broadcast_to(const ClientSpec& client, const ParamSet& global, ChannelAudit& audit) {
    if (client.modality == Modality::Multimodal) return global;
    ParamSet trimmed;
    trimmed.audio_encoder = global.audio_encoder;
    trimmed.audio_head = global.audio_head;
    if (trimmed.visual_encoder || trimmed.fusion_head) {
        audit.visual_blocks_to_audio_only++;  // unreachable by construction
    }
    return trimmed;
}

RoundSample sample_round_clients(std::size_t round, const std::vector<ClientSpec>& clients,
                                 std::size_t k, std::uint64_t seed) {
    require(k <= clients.size(), "cannot sample more clients than exist");
    std::vector<std::size_t> ids(clients.size());
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(mix64(seed, kSampleTag, std::uint64_t{1}, round));
    // Partial Fisher-Yates: first k entries are the sample.
    for (std::size_t i = 0; i < k; ++i) {
        std::swap(ids[i], ids[i + rng.uniform_int(ids.size() - i)]);
    }
    ids.resize(k);
    std::sort(ids.begin(), ids.end());
    RoundSample sample;
    for (std::size_t id : ids) {
        (clients[id].modality == Modality::AudioOnly ? sample.audio_only : sample.multimodal)
            .push_back(id);
    }
    return sample;
}

std::vector<std::size_t> sample_from_pool(const std::vector<std::size_t>& pool, std::size_t k,
                                          std::uint64_t seed, int stage, std::size_t round) {
    require(k <= pool.size(), "cannot sample more clients than the pool holds");
    std::vector<std::size_t> ids = pool;
    Rng rng(mix64(seed, kSampleTag, static_cast<std::uint64_t>(stage), round));
    for (std::size_t i = 0; i < k; ++i) {
        std::swap(ids[i], ids[i + rng.uniform_int(ids.size() - i)]);
    }
    ids.resize(k);
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

AudioBatch make_audio_batch(const MultimodalDataset& data,
                            const std::vector<std::size_t>& indices) {
    AudioBatch b;
    for (std::size_t i : indices) {
        b.inputs.push_back(data.train[i].audio);
        b.labels.push_back(data.train[i].label);
    }
    return b;
}

MultimodalBatch make_multimodal_batch(const MultimodalDataset& data,
                                      const std::vector<std::size_t>& indices) {
    MultimodalBatch b;
    for (std::size_t i : indices) {
        b.audio.push_back(data.train[i].audio);
        b.visual.push_back(data.train[i].visual);
        b.labels.push_back(data.train[i].label);
    }
    return b;
}

// One shared driver for every local-training variant: shuffles the shard
// once per epoch with the derived seed and applies `step` batch by batch.
template <typename StepFn>
double run_epochs(const ClientSpec& client, const RunConfig& cfg, int stage, std::size_t round,
                  const StepFn& step) {
    if (client.shard.empty()) throw std::logic_error("client shard is empty");
    Rng rng(mix64(cfg.seed, static_cast<std::uint64_t>(stage), round, client.id, kTrainTag));
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    std::vector<std::size_t> order = client.shard;
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            loss_sum += step(batch_of(order, start, cfg.batch_size));
            ++n_batches;
        }
    }
    return n_batches > 0 ? loss_sum / static_cast<double>(n_batches) : 0.0;
}

}  // namespace

ClientUpdate train_audio_on_shard(const ParamSet& global, const ClientSpec& client,
                                  const MultimodalDataset& data, const Topology& topo,
                                  const RunConfig& cfg, int stage, std::size_t round) {
    AudioModel model = build_audio_model(topo, global);
    const double loss =
        run_epochs(client, cfg, stage, round, [&](const std::vector<std::size_t>& idx) {
            const GradResult g = nnkit::grad_ce(model, make_audio_batch(data, idx));
            Vec flat = model.to_flat();
            nnkit::sgd_step(flat, g.grad, cfg.lr);
            model.from_flat(flat);
            return g.loss;
        });
    ClientUpdate up{client.id, client.shard.size(), {}, loss};
    store_audio_model(model, up.params);
    return up;
}

ClientUpdate local_train_audio(const ParamSet& global, const ClientSpec& client,
                               const MultimodalDataset& data, const Topology& topo,
                               const RunConfig& cfg, int stage, std::size_t round) {
    require(client.modality == Modality::AudioOnly, "local_train_audio wants an audio-only client");
    return train_audio_on_shard(global, client, data, topo, cfg, stage, round);
}

ClientUpdate local_train_multimodal(const ParamSet& global, const ClientSpec& client,
                                    const MultimodalDataset& data, const Topology& topo,
                                    const RunConfig& cfg, int stage, std::size_t round) {
    require(client.modality == Modality::Multimodal,
            "local_train_multimodal wants a multimodal client");
    MultimodalModel model = build_multimodal_model(topo, global);
    const double loss =
        run_epochs(client, cfg, stage, round, [&](const std::vector<std::size_t>& idx) {
            const GradResult g = nnkit::grad_ce(model, make_multimodal_batch(data, idx));
            Vec flat = model.to_flat();
            nnkit::sgd_step(flat, g.grad, cfg.lr);
            model.from_flat(flat);
            return g.loss;
        });
    // The audio head is not part of the local fusion objective; it is never
    // returned, so it cannot dilute the audio-only cohort's average.
    ClientUpdate up{client.id, client.shard.size(), {}, loss};
    store_multimodal_model(model, up.params);
    return up;
}

ClientUpdate distill_local(const ParamSet& student_global, const ParamSet& teacher,
                           const ClientSpec& client, const MultimodalDataset& data,
                           const Topology& topo, const RunConfig& cfg, int stage,
                           std::size_t round) {
    if (client.modality != Modality::Multimodal) {
        throw std::logic_error("distill_local requires a multimodal client");
    }
    AudioModel student = build_audio_model(topo, student_global);
    const MultimodalModel teacher_model = build_multimodal_model(topo, teacher);
    const double loss =
        run_epochs(client, cfg, stage, round, [&](const std::vector<std::size_t>& idx) {
            AudioBatch batch = make_audio_batch(data, idx);
            std::vector<Vec> teacher_probs;
            teacher_probs.reserve(idx.size());
            for (std::size_t i : idx) {
                const auto cache = nnkit::forward_multimodal(teacher_model, data.train[i].audio,
                                                             data.train[i].visual);
                teacher_probs.push_back(nnkit::softmax(cache.logits));
            }
            const GradResult g = nnkit::grad_distill(student, teacher_probs, batch,
                                                     cfg.temperature, cfg.kl_weight);
            Vec flat = student.to_flat();
            nnkit::sgd_step(flat, g.grad, cfg.lr);
            student.from_flat(flat);
            return g.loss;
        });
    ClientUpdate up{client.id, client.shard.size(), {}, loss};
    store_audio_model(student, up.params);
    return up;
}

namespace {

using BlockPtr = std::optional<Vec> ParamSet::*;
constexpr BlockPtr kBlocks[] = {&ParamSet::audio_encoder, &ParamSet::visual_encoder,
                                &ParamSet::audio_head, &ParamSet::fusion_head};

// Mean (or size-weighted mean) of one named block over the updates that
// carry it; falls back to prev when nobody trained it.
std::optional<Vec> average_block(const std::optional<Vec>& prev,
                                 const std::vector<const ClientUpdate*>& updates, BlockPtr block,
                                 bool size_weighted) {
    std::vector<const ClientUpdate*> carriers;
    for (const auto* u : updates) {
        if (u->params.*block) carriers.push_back(u);
    }
    if (carriers.empty()) return prev;
    // Anchored mean: v0 + mean(v_i - v0). Algebraically the same, but bit-exact
    // when every carrier holds the same parameters (the FedAvg fixed point).
    const Vec& anchor = *(carriers.front()->params.*block);
    const std::size_t n = anchor.size();
    Vec acc(n, 0.0);
    if (size_weighted) {
        double total = 0.0;
        for (const auto* u : carriers) total += static_cast<double>(u->shard_size);
        for (const auto* u : carriers) {
            const double w = static_cast<double>(u->shard_size) / total;
            const Vec& v = *(u->params.*block);
            require(v.size() == n, "block length mismatch across updates");
            for (std::size_t i = 0; i < n; ++i) acc[i] += w * (v[i] - anchor[i]);
        }
    } else {
        for (const auto* u : carriers) {
            const Vec& v = *(u->params.*block);
            require(v.size() == n, "block length mismatch across updates");
            for (std::size_t i = 0; i < n; ++i) acc[i] += v[i] - anchor[i];
        }
        const double inv = 1.0 / static_cast<double>(carriers.size());
        for (auto& x : acc) x *= inv;
    }
    for (std::size_t i = 0; i < n; ++i) acc[i] += anchor[i];
    return acc;
}

std::vector<const ClientUpdate*> sorted_by_id(const std::vector<ClientUpdate>& updates) {
    std::vector<const ClientUpdate*> ptrs;
    for (const auto& u : updates) ptrs.push_back(&u);
    std::sort(ptrs.begin(), ptrs.end(),
              [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
    return ptrs;
}

}  // namespace

ParamSet aggregate_stage1(const ParamSet& prev, const std::vector<ClientUpdate>& updates,
                          bool size_weighted) {
    require(!updates.empty(), "aggregate_stage1 needs at least one update");
    const auto ptrs = sorted_by_id(updates);
    ParamSet out;
    for (BlockPtr block : kBlocks) {
        out.*block = average_block(prev.*block, ptrs, block, size_weighted);
    }
    return out;
}

ParamSet aggregate_stage2(const ParamSet& prev, const std::vector<ClientUpdate>& updates,
                          Stage2Divisor divisor, std::size_t population_audio_count) {
    require(!updates.empty(), "aggregate_stage2 needs at least one update");
    const auto ptrs = sorted_by_id(updates);
    ParamSet out = prev;
    for (BlockPtr block : {&ParamSet::audio_encoder, &ParamSet::audio_head}) {
        const Vec& anchor = *(ptrs.front()->params.*block);
        const std::size_t n = anchor.size();
        Vec acc(n, 0.0);
        if (divisor == Stage2Divisor::PopulationAudioCount) {
            // literal sum / population count; not a mean of the participants
            require(population_audio_count > 0, "population audio count required for this divisor");
            const double div = static_cast<double>(population_audio_count);
            for (const auto* u : ptrs) {
                const Vec& v = *(u->params.*block);
                require(v.size() == n, "block length mismatch across updates");
                for (std::size_t i = 0; i < n; ++i) acc[i] += v[i];
            }
            for (auto& x : acc) x /= div;
        } else {
            // anchored mean; bit-exact when every update is identical
            for (const auto* u : ptrs) {
                const Vec& v = *(u->params.*block);
                require(v.size() == n, "block length mismatch across updates");
                for (std::size_t i = 0; i < n; ++i) acc[i] += v[i] - anchor[i];
            }
            const double inv = 1.0 / static_cast<double>(ptrs.size());
            for (std::size_t i = 0; i < n; ++i) acc[i] = anchor[i] + acc[i] * inv;
        }
        out.*block = std::move(acc);
    }
    return out;
}

EvalResult evaluate_audio(const AudioModel& model, const MultimodalDataset& data, std::size_t k) {
    std::vector<Vec> logits;
    std::vector<std::size_t> labels;
    logits.reserve(data.test.size());
    for (const auto& s : data.test) {
        logits.push_back(nnkit::forward_audio(model, s.audio).logits);
        labels.push_back(s.label);
    }
    EvalResult res;
    res.top1 = metrics::topk_accuracy(logits, labels, 1);
    res.topk = metrics::topk_accuracy(logits, labels, std::min(k, logits.front().size()));
    for (const auto& row : logits) {
        res.predictions.push_back(static_cast<std::size_t>(
            std::max_element(row.begin(), row.end()) - row.begin()));
    }
    return res;
}

EvalResult evaluate_multimodal(const MultimodalModel& model, const MultimodalDataset& data,
                               std::size_t k) {
    std::vector<Vec> logits;
    std::vector<std::size_t> labels;
    logits.reserve(data.test.size());
    for (const auto& s : data.test) {
        logits.push_back(nnkit::forward_multimodal(model, s.audio, s.visual).logits);
        labels.push_back(s.label);
    }
    EvalResult res;
    res.top1 = metrics::topk_accuracy(logits, labels, 1);
    res.topk = metrics::topk_accuracy(logits, labels, std::min(k, logits.front().size()));
    for (const auto& row : logits) {
        res.predictions.push_back(static_cast<std::size_t>(
            std::max_element(row.begin(), row.end()) - row.begin()));
    }
    return res;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t w = std::min(workers, n);
    std::vector<std::thread> threads;
    threads.reserve(w);
    for (std::size_t t = 0; t < w; ++t) {
        threads.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += w) fn(i);
        });
    }
    for (auto& th : threads) th.join();
}

StageResult run_stage1(const RunConfig& cfg, const MultimodalDataset& data,
                       const std::vector<ClientSpec>& clients, const ParamSet& initial,
                       const ExecOptions& exec, ChannelAudit& audit) {
    const Topology topo = make_topology(cfg, data);
    StageResult result;
    result.global = initial;
    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        const RoundSample sample =
            sample_round_clients(round, clients, cfg.clients_per_round, cfg.seed);
        std::vector<std::size_t> ids = sample.audio_only;
        ids.insert(ids.end(), sample.multimodal.begin(), sample.multimodal.end());
        std::sort(ids.begin(), ids.end());

        std::vector<ParamSet> broadcasts;
        broadcasts.reserve(ids.size());
        for (std::size_t id : ids) broadcasts.push_back(broadcast_to(clients[id], result.global, audit));

        std::vector<ClientUpdate> updates(ids.size());
        parallel_for(ids.size(), exec.workers, [&](std::size_t i) {
            const ClientSpec& client = clients[ids[i]];
            updates[i] = client.modality == Modality::AudioOnly
                             ? local_train_audio(broadcasts[i], client, data, topo, cfg, 1, round)
                             : local_train_multimodal(broadcasts[i], client, data, topo, cfg, 1,
                                                      round);
        });
        result.global = aggregate_stage1(result.global, updates, cfg.size_weighted_aggregation);

        metrics::RoundMetrics m;
        m.round = round;
        m.stage = 1;
        const EvalResult ea = evaluate_audio(build_audio_model(topo, result.global), data, cfg.topk);
        m.audio_top1 = ea.top1;
        m.audio_topk = ea.topk;
        const EvalResult em =
            evaluate_multimodal(build_multimodal_model(topo, result.global), data, cfg.topk);
        m.multimodal_top1 = em.top1;
        double loss = 0.0;
        for (const auto& u : updates) loss += u.train_loss;
        m.train_loss = loss / static_cast<double>(updates.size());
        result.history.push_back(m);
    }
    return result;
}

StageResult run_stage2_distill(const RunConfig& cfg, const MultimodalDataset& data,
                               const std::vector<ClientSpec>& clients, const ParamSet& teacher,
                               const ParamSet& start_audio, const ExecOptions& exec,
                               ChannelAudit& audit) {
    const Topology topo = make_topology(cfg, data);
    std::vector<std::size_t> pool;
    for (const auto& c : clients) {
        if (c.modality == Modality::Multimodal) pool.push_back(c.id);
    }
    StageResult result;
    result.global.audio_encoder = start_audio.audio_encoder;
    result.global.audio_head = start_audio.audio_head;
    std::size_t population_audio = clients.size() - pool.size();
    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        double loss = 0.0;
        if (!pool.empty()) {
            const std::size_t k = std::min(cfg.clients_per_round, pool.size());
            const auto ids = sample_from_pool(pool, k, cfg.seed, 2, round);
            std::vector<ParamSet> broadcasts;
            broadcasts.reserve(ids.size());
            for (std::size_t id : ids)
                broadcasts.push_back(broadcast_to(clients[id], result.global, audit));
            std::vector<ClientUpdate> updates(ids.size());
            parallel_for(ids.size(), exec.workers, [&](std::size_t i) {
                updates[i] =
                    distill_local(broadcasts[i], teacher, clients[ids[i]], data, topo, cfg, 2, round);
            });
            result.global = aggregate_stage2(result.global, updates, cfg.stage2_divisor,
                                             population_audio);
            for (const auto& u : updates) loss += u.train_loss;
            loss /= static_cast<double>(updates.size());
        }
        metrics::RoundMetrics m;
        m.round = round;
        m.stage = 2;
        const EvalResult ea = evaluate_audio(build_audio_model(topo, result.global), data, cfg.topk);
        m.audio_top1 = ea.top1;
        m.audio_topk = ea.topk;
        m.train_loss = loss;
        result.history.push_back(m);
    }
    return result;
}

RunResult run_modality_mirror(const RunConfig& cfg, const MultimodalDataset& data,
                              const Partition& partition,
                              const std::vector<Modality>& modalities,
                              const ExecOptions& exec) {
    const Topology topo = make_topology(cfg, data);
    const auto clients = build_clients(partition, modalities);
    RunResult result;
    result.strategy = "modality_mirror";

    const ParamSet initial = init_global_params(topo, cfg.seed);
    const StageResult stage1 = run_stage1(cfg, data, clients, initial, exec, result.audit);
    const ParamSet& teacher = stage1.global;

    ParamSet start_audio;
    if (cfg.warm_start) {
        start_audio.audio_encoder = teacher.audio_encoder;
        start_audio.audio_head = teacher.audio_head;
    } else {
        const ParamSet fresh = init_global_params(topo, mix64(cfg.seed, kColdStartTag));
        start_audio.audio_encoder = fresh.audio_encoder;
        start_audio.audio_head = fresh.audio_head;
    }
    const StageResult stage2 =
        run_stage2_distill(cfg, data, clients, teacher, start_audio, exec, result.audit);

    result.audio_model = stage2.global;
    result.multimodal_model = teacher;
    result.history = stage1.history;
    result.history.insert(result.history.end(), stage2.history.begin(), stage2.history.end());
    const EvalResult final_eval =
        evaluate_audio(build_audio_model(topo, result.audio_model), data, cfg.topk);
    std::vector<std::size_t> labels;
    for (const auto& s : data.test) labels.push_back(s.label);
    result.audio_class_report =
        metrics::class_f1(final_eval.predictions, labels, topo.num_classes);
    result.audio_class_report.dataset_hash = data.content_hash();
    return result;
}

namespace {

constexpr std::uint64_t kCheckpointMagic = 0x4d4d504152414d31ULL;  // "MMPARAM1"

void put_block(std::ofstream& os, const std::optional<Vec>& block) {
    const std::uint64_t n = block ? block->size() : 0;
    const std::uint8_t present = block ? 1 : 0;
    os.write(reinterpret_cast<const char*>(&present), 1);
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    if (block) {
        os.write(reinterpret_cast<const char*>(block->data()),
                 static_cast<std::streamsize>(n * sizeof(double)));
    }
}

std::optional<Vec> get_block(std::ifstream& is) {
    std::uint8_t present = 0;
    std::uint64_t n = 0;
    is.read(reinterpret_cast<char*>(&present), 1);
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (!present) return std::nullopt;
    Vec v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    return v;
}

}  // namespace

void save_paramset(const ParamSet& ps, const Topology& topo, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(reinterpret_cast<const char*>(&kCheckpointMagic), sizeof(kCheckpointMagic));
    put_block(os, ps.audio_encoder);
    put_block(os, ps.visual_encoder);
    put_block(os, ps.audio_head);
    put_block(os, ps.fusion_head);
    if (!os) throw std::runtime_error("write failed: " + path);

    nlohmann::json side;
    side["layout"] = "per layer: weight row-major then bias; layers in forward order";
    side["block_order"] = {"audio_encoder", "visual_encoder", "audio_head", "fusion_head"};
    side["topology"] = {{"audio_dim", topo.audio_dim},
                        {"visual_dim", topo.visual_dim},
                        {"hidden_dim", topo.hidden_dim},
                        {"embed_dim", topo.embed_dim},
                        {"num_classes", topo.num_classes}};
    std::ofstream js(path + ".json");
    if (!js) throw std::runtime_error("cannot open for writing: " + path + ".json");
    js << side.dump(2) << "\n";
}

ParamSet load_paramset(const std::string& path, Topology* topo_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    std::uint64_t magic = 0;
    is.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    if (magic != kCheckpointMagic) throw std::runtime_error("not a checkpoint file: " + path);
    ParamSet ps;
    ps.audio_encoder = get_block(is);
    ps.visual_encoder = get_block(is);
    ps.audio_head = get_block(is);
    ps.fusion_head = get_block(is);
    if (!is) throw std::runtime_error("truncated checkpoint file: " + path);
    if (topo_out) {
        std::ifstream js(path + ".json");
        if (js) {
            nlohmann::json side = nlohmann::json::parse(js);
            const auto& t = side.at("topology");
            topo_out->audio_dim = t.at("audio_dim").get<std::size_t>();
            topo_out->visual_dim = t.at("visual_dim").get<std::size_t>();
            topo_out->hidden_dim = t.at("hidden_dim").get<std::size_t>();
            topo_out->embed_dim = t.at("embed_dim").get<std::size_t>();
            topo_out->num_classes = t.at("num_classes").get<std::size_t>();
        }
    }
    return ps;
}

}  // namespace mmfl::flcore
