#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmfl/datagen.hpp"
#include "mmfl/metrics.hpp"
#include "mmfl/nnkit.hpp"

namespace mmfl::flcore {

using datagen::Modality;
using datagen::MultimodalDataset;
using datagen::Partition;
using nnkit::AudioModel;
using nnkit::MultimodalModel;
using nnkit::Vec;

// Named flat parameter blocks; the unit of aggregation and transfer.
// Audio-only clients never carry the visual blocks.
struct ParamSet {
    std::optional<Vec> audio_encoder;
    std::optional<Vec> visual_encoder;
    std::optional<Vec> audio_head;
    std::optional<Vec> fusion_head;
};

struct ClientSpec {
    std::size_t id = 0;
    Modality modality = Modality::Multimodal;
    std::vector<std::size_t> shard;
};

enum class Strategy { ModalityMirror, UniFL, MultiFL, Harmony };
enum class Stage2Divisor { Mean, PopulationAudioCount };

struct RunConfig {
    std::size_t n_clients = 100;
    double missing_rate = 0.3;
    std::size_t rounds = 200;        // per stage
    std::size_t local_epochs = 1;
    std::size_t clients_per_round = 10;
    double partition_alpha = 0.1;  // Dirichlet concentration for the shards
    double lr = 5e-4;
    double temperature = 2.0;
    double kl_weight = 1.0;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    std::size_t topk = 5;
    std::size_t hidden_dim = 64;
    std::size_t embed_dim = 32;
    Strategy strategy = Strategy::ModalityMirror;
    Stage2Divisor stage2_divisor = Stage2Divisor::Mean;
    bool warm_start = true;               // stage 2 starts from stage-1 audio model
    bool size_weighted_aggregation = false;
    bool harmony_freeze_encoders = false;
};

struct ExecOptions {
    std::size_t workers = 1;  // never affects results, only wall time
};

struct Topology {
    std::size_t audio_dim = 0;
    std::size_t visual_dim = 0;
    std::size_t hidden_dim = 64;
    std::size_t embed_dim = 32;
    std::size_t num_classes = 0;
};

Topology make_topology(const RunConfig& cfg, const MultimodalDataset& data);

// Counters for the simulated channel; all zero in a correct run.
struct ChannelAudit {
    std::size_t visual_blocks_to_audio_only = 0;
    std::size_t cross_cohort_audio_contributions = 0;
};

struct ClientUpdate {
    std::size_t client_id = 0;
    std::size_t shard_size = 0;
    ParamSet params;
    double train_loss = 0.0;
};

struct RunResult {
    std::string strategy;
    ParamSet audio_model;
    std::optional<ParamSet> multimodal_model;
    std::vector<metrics::RoundMetrics> history;
    metrics::ClassReport audio_class_report;
    ChannelAudit audit;
};

std::vector<ClientSpec> build_clients(const Partition& partition,
                                      const std::vector<Modality>& modalities);

// Fresh global parameters, seeded; block init order is fixed so the audio
// model bytes do not depend on the visual dims being used or not.
ParamSet init_global_params(const Topology& topo, std::uint64_t seed);

AudioModel build_audio_model(const Topology& topo, const ParamSet& params);
MultimodalModel build_multimodal_model(const Topology& topo, const ParamSet& params);
void store_audio_model(const AudioModel& model, ParamSet& params);
void store_multimodal_model(const MultimodalModel& model, ParamSet& params);

// The broadcast channel: an audio-only client receives only audio blocks.
ParamSet broadcast_to(const ClientSpec& client, const ParamSet& global, ChannelAudit& audit);

struct RoundSample {
    std::vector<std::size_t> audio_only;   // ascending ids
    std::vector<std::size_t> multimodal;   // ascending ids
};

RoundSample sample_round_clients(std::size_t round, const std::vector<ClientSpec>& clients,
                                 std::size_t k, std::uint64_t seed);

// k ids without replacement from `pool`, ascending; deterministic in
// (seed, stage, round).
std::vector<std::size_t> sample_from_pool(const std::vector<std::size_t>& pool, std::size_t k,
                                          std::uint64_t seed, int stage, std::size_t round);

// Mini-batch SGD on the audio classifier over the client shard. No modality
// precondition; Harmony trains this on every client.
ClientUpdate train_audio_on_shard(const ParamSet& global, const ClientSpec& client,
                                  const MultimodalDataset& data, const Topology& topo,
                                  const RunConfig& cfg, int stage, std::size_t round);

ClientUpdate local_train_audio(const ParamSet& global, const ClientSpec& client,
                               const MultimodalDataset& data, const Topology& topo,
                               const RunConfig& cfg, int stage, std::size_t round);

ClientUpdate local_train_multimodal(const ParamSet& global, const ClientSpec& client,
                                    const MultimodalDataset& data, const Topology& topo,
                                    const RunConfig& cfg, int stage, std::size_t round);

// Stage-2 local distillation: audio student against the frozen multimodal
// teacher; the result carries only audio blocks.
ClientUpdate distill_local(const ParamSet& student_global, const ParamSet& teacher,
                           const ClientSpec& client, const MultimodalDataset& data,
                           const Topology& topo, const RunConfig& cfg, int stage,
                           std::size_t round);

// Modality-aware FedAvg: each block is averaged over exactly the clients
// that carry it, in ascending client-id order; blocks nobody trained carry
// over from prev.
ParamSet aggregate_stage1(const ParamSet& prev, const std::vector<ClientUpdate>& updates,
                          bool size_weighted = false);

ParamSet aggregate_stage2(const ParamSet& prev, const std::vector<ClientUpdate>& updates,
                          Stage2Divisor divisor = Stage2Divisor::Mean,
                          std::size_t population_audio_count = 0);

struct EvalResult {
    double top1 = 0.0;
    double topk = 0.0;
    std::vector<std::size_t> predictions;
};

EvalResult evaluate_audio(const AudioModel& model, const MultimodalDataset& data, std::size_t k);
EvalResult evaluate_multimodal(const MultimodalModel& model, const MultimodalDataset& data,
                               std::size_t k);

struct StageResult {
    ParamSet global;
    std::vector<metrics::RoundMetrics> history;
};

// Stage 1: round-based modality-aware federated averaging. Also used
// verbatim as the multifl baseline.
StageResult run_stage1(const RunConfig& cfg, const MultimodalDataset& data,
                       const std::vector<ClientSpec>& clients, const ParamSet& initial,
                       const ExecOptions& exec, ChannelAudit& audit);

// Federated distillation (stage 2) against a frozen teacher.
StageResult run_stage2_distill(const RunConfig& cfg, const MultimodalDataset& data,
                               const std::vector<ClientSpec>& clients, const ParamSet& teacher,
                               const ParamSet& start_audio, const ExecOptions& exec,
                               ChannelAudit& audit);

RunResult run_modality_mirror(const RunConfig& cfg, const MultimodalDataset& data,
                              const Partition& partition,
                              const std::vector<Modality>& modalities,
                              const ExecOptions& exec = {});

// Checkpoint: raw block bytes plus a JSON sidecar describing the topology.
void save_paramset(const ParamSet& ps, const Topology& topo, const std::string& path);
ParamSet load_paramset(const std::string& path, Topology* topo_out = nullptr);

// Deterministic parallel map: out[i] = fn(i), any worker count.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace mmfl::flcore
