#include "dispel/ledger.hpp"

#include <openssl/bn.h>
#include <openssl/core_names.h>
#include <openssl/ec.h>
#include <openssl/evp.h>
#include <openssl/param_build.h>
#include <openssl/rand.h>

#include <algorithm>
#include <atomic>
#include <latch>
#include <unordered_map>

namespace dispel {

namespace {

constexpr char kCurve[] = "secp256k1";

struct BnFree {
  void operator()(BIGNUM* b) const { BN_free(b); }
};
struct BnCtxFree {
  void operator()(BN_CTX* c) const { BN_CTX_free(c); }
};
struct GroupFree {
  void operator()(EC_GROUP* g) const { EC_GROUP_free(g); }
};
struct PointFree {
  void operator()(EC_POINT* p) const { EC_POINT_free(p); }
};
struct PkeyFree {
  void operator()(EVP_PKEY* k) const { EVP_PKEY_free(k); }
};
struct PkeyCtxFree {
  void operator()(EVP_PKEY_CTX* c) const { EVP_PKEY_CTX_free(c); }
};
struct SigFree {
  void operator()(ECDSA_SIG* s) const { ECDSA_SIG_free(s); }
};
struct ParamBldFree {
  void operator()(OSSL_PARAM_BLD* b) const { OSSL_PARAM_BLD_free(b); }
};
struct ParamFree {
  void operator()(OSSL_PARAM* p) const { OSSL_PARAM_free(p); }
};

using BnPtr = std::unique_ptr<BIGNUM, BnFree>;
using PkeyPtr = std::unique_ptr<EVP_PKEY, PkeyFree>;
using PkeyCtxPtr = std::unique_ptr<EVP_PKEY_CTX, PkeyCtxFree>;

void check(bool ok, const char* what) {
  if (!ok) throw CryptoError(what);
}

const EC_GROUP& group() {
  static std::unique_ptr<EC_GROUP, GroupFree> g(EC_GROUP_new_by_curve_name(NID_secp256k1));
  check(g != nullptr, "secp256k1 unavailable");
  return *g;
}

// EVP key from an encoded public point and an optional private scalar.
PkeyPtr make_pkey(ByteView pub, const BIGNUM* priv) {
  std::unique_ptr<OSSL_PARAM_BLD, ParamBldFree> bld(OSSL_PARAM_BLD_new());
  check(bld != nullptr, "param builder");
  check(OSSL_PARAM_BLD_push_utf8_string(bld.get(), OSSL_PKEY_PARAM_GROUP_NAME, kCurve, 0) == 1, "group param");
  check(OSSL_PARAM_BLD_push_octet_string(bld.get(), OSSL_PKEY_PARAM_PUB_KEY, pub.data(), pub.size()) == 1, "pub param");
  if (priv) check(OSSL_PARAM_BLD_push_BN(bld.get(), OSSL_PKEY_PARAM_PRIV_KEY, priv) == 1, "priv param");
  std::unique_ptr<OSSL_PARAM, ParamFree> params(OSSL_PARAM_BLD_to_param(bld.get()));
  check(params != nullptr, "params");

  PkeyCtxPtr ctx(EVP_PKEY_CTX_new_from_name(nullptr, "EC", nullptr));
  check(ctx != nullptr, "EC context");
  check(EVP_PKEY_fromdata_init(ctx.get()) == 1, "fromdata init");
  EVP_PKEY* raw = nullptr;
  int sel = priv ? EVP_PKEY_KEYPAIR : EVP_PKEY_PUBLIC_KEY;
  if (EVP_PKEY_fromdata(ctx.get(), &raw, sel, params.get()) != 1) return nullptr;
  return PkeyPtr(raw);
}

Bytes der_signature(const Signature& sig) {
  std::unique_ptr<ECDSA_SIG, SigFree> s(ECDSA_SIG_new());
  check(s != nullptr, "signature alloc");
  BIGNUM* r = BN_bin2bn(sig.data(), 32, nullptr);
  BIGNUM* sv = BN_bin2bn(sig.data() + 32, 32, nullptr);
  if (!r || !sv || ECDSA_SIG_set0(s.get(), r, sv) != 1) {
    BN_free(r);
    BN_free(sv);
    throw CryptoError("signature set");
  }
  int len = i2d_ECDSA_SIG(s.get(), nullptr);
  check(len > 0, "signature encode");
  Bytes der(static_cast<std::size_t>(len));
  auto* p = der.data();
  i2d_ECDSA_SIG(s.get(), &p);
  return der;
}

bool zero(ByteView v) {
  return std::all_of(v.begin(), v.end(), [](std::uint8_t b) { return b == 0; });
}

}  // namespace

std::string to_hex(const PubKey& k) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(66);
  for (auto b : k) {
    out += kHex[b >> 4];
    out += kHex[b & 15];
  }
  return out;
}

PubKey pubkey_from_hex(std::string_view hex) {
  if (hex.size() != 66) throw DecodeError("public key hex must be 66 characters");
  auto val = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  PubKey k{};
  for (std::size_t i = 0; i < k.size(); ++i) {
    int hi = val(hex[2 * i]), lo = val(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) throw DecodeError("public key hex has a non-hex character");
    k[i] = static_cast<std::uint8_t>(hi << 4 | lo);
  }
  return k;
}

// Keys ---------------------------------------------------------------------------

struct KeyPair::Impl {
  PkeyPtr pkey;
};

namespace {

// Private scalar from 32 bytes, reduced modulo the group order.
std::pair<BnPtr, PubKey> scalar_key(ByteView material) {
  std::unique_ptr<BN_CTX, BnCtxFree> bctx(BN_CTX_new());
  BnPtr order(BN_new());
  check(bctx && order && EC_GROUP_get_order(&group(), order.get(), bctx.get()) == 1, "group order");
  BnPtr priv(BN_bin2bn(material.data(), static_cast<int>(material.size()), nullptr));
  check(priv != nullptr, "scalar");
  check(BN_nnmod(priv.get(), priv.get(), order.get(), bctx.get()) == 1, "scalar mod");
  if (BN_is_zero(priv.get())) BN_one(priv.get());

  std::unique_ptr<EC_POINT, PointFree> point(EC_POINT_new(&group()));
  check(point && EC_POINT_mul(&group(), point.get(), priv.get(), nullptr, nullptr, bctx.get()) == 1, "public point");
  PubKey pub{};
  auto len = EC_POINT_point2oct(&group(), point.get(), POINT_CONVERSION_COMPRESSED, pub.data(), pub.size(), bctx.get());
  check(len == pub.size(), "point encoding");
  return {std::move(priv), pub};
}

}  // namespace

KeyPair KeyPair::from_private(ByteView material) {
  auto [priv, pub] = scalar_key(material);
  KeyPair kp;
  kp.pub_ = pub;
  kp.impl_ = std::make_unique<Impl>();
  kp.impl_->pkey = make_pkey(kp.pub_, priv.get());
  check(kp.impl_->pkey != nullptr, "key import");
  return kp;
}

KeyPair KeyPair::generate() {
  std::array<std::uint8_t, 32> material{};
  check(RAND_bytes(material.data(), static_cast<int>(material.size())) == 1, "RAND_bytes");
  return from_private(material);
}

KeyPair KeyPair::from_seed(std::uint64_t seed) {
  Bytes material{'k', 'e', 'y'};
  be::put_u64(material, seed);
  return from_private(sha256(material).bytes);
}

KeyPair::KeyPair(KeyPair&&) noexcept = default;
KeyPair& KeyPair::operator=(KeyPair&&) noexcept = default;
KeyPair::~KeyPair() = default;

Signature KeyPair::sign(ByteView message) const {
  auto h = sha256(message);
  PkeyCtxPtr ctx(EVP_PKEY_CTX_new(impl_->pkey.get(), nullptr));
  check(ctx && EVP_PKEY_sign_init(ctx.get()) == 1, "sign init");
  std::size_t len = 0;
  check(EVP_PKEY_sign(ctx.get(), nullptr, &len, h.bytes.data(), h.bytes.size()) == 1, "sign size");
  Bytes der(len);
  check(EVP_PKEY_sign(ctx.get(), der.data(), &len, h.bytes.data(), h.bytes.size()) == 1, "sign");
  const auto* p = der.data();
  std::unique_ptr<ECDSA_SIG, SigFree> s(d2i_ECDSA_SIG(nullptr, &p, static_cast<long>(len)));
  check(s != nullptr, "signature decode");
  Signature out{};
  check(BN_bn2binpad(ECDSA_SIG_get0_r(s.get()), out.data(), 32) == 32, "r");
  check(BN_bn2binpad(ECDSA_SIG_get0_s(s.get()), out.data() + 32, 32) == 32, "s");
  return out;
}

// Transfers ------------------------------------------------------------------------

Bytes TransferTx::preimage() const {
  Bytes out;
  out.reserve(kPreimageSize);
  be::put_u8(out, kTag);
  be::put_bytes(out, from);
  be::put_bytes(out, to);
  be::put_u64(out, amount);
  be::put_u64(out, nonce);
  return out;
}

Bytes TransferTx::encode() const {
  auto out = preimage();
  be::put_bytes(out, signature);
  out.resize(kSize, 0);
  return out;
}

TransferTx TransferTx::decode(ByteView bytes) {
  if (bytes.size() != kSize) throw DecodeError("transfer must be 400 bytes");
  be::Reader r(bytes);
  if (r.u8() != kTag) throw DecodeError("not a transfer");
  TransferTx tx;
  auto from = r.bytes(33);
  std::copy(from.begin(), from.end(), tx.from.begin());
  auto to = r.bytes(33);
  std::copy(to.begin(), to.end(), tx.to.begin());
  tx.amount = r.u64();
  tx.nonce = r.u64();
  auto sig = r.bytes(64);
  std::copy(sig.begin(), sig.end(), tx.signature.begin());
  if (!zero(r.bytes(r.remaining()))) throw DecodeError("non-zero transfer padding");
  for (const auto* k : {&tx.from, &tx.to})
    if ((*k)[0] != 0x02 && (*k)[0] != 0x03) throw DecodeError("public key must be compressed");
  return tx;
}

TransferTx TransferTx::make(const KeyPair& from, const PubKey& to, std::uint64_t amount, std::uint64_t nonce) {
  TransferTx tx;
  tx.from = from.public_key();
  tx.to = to;
  tx.amount = amount;
  tx.nonce = nonce;
  tx.signature = from.sign(tx.preimage());
  return tx;
}

const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::Valid: return "valid";
    case Verdict::Malformed: return "malformed";
    case Verdict::BadSignature: return "bad_signature";
  }
  return "unknown";
}

// Verification -----------------------------------------------------------------------

struct Verifier::Impl {
  static constexpr std::size_t kMaxKeys = 1 << 14;

  struct KeyHash {
    std::size_t operator()(const PubKey& k) const noexcept {
      std::size_t h = 0;
      for (std::size_t i = 1; i < 1 + sizeof(std::size_t); ++i) h = h << 8 | k[i];
      return h;
    }
  };

  // nullptr marks a key that failed to parse.
  std::unordered_map<PubKey, PkeyPtr, KeyHash> keys;

  EVP_PKEY* key(const PubKey& k) {
    auto it = keys.find(k);
    if (it != keys.end()) return it->second.get();
    if (keys.size() >= kMaxKeys) keys.clear();
    return keys.emplace(k, make_pkey(k, nullptr)).first->second.get();
  }
};

Verifier::Verifier() : impl_(std::make_unique<Impl>()) {}
Verifier::~Verifier() = default;

std::size_t Verifier::cached_keys() const { return impl_->keys.size(); }

Verdict Verifier::verify(const Transaction& tx) {
  TransferTx t;
  try {
    t = TransferTx::decode(tx.payload());
  } catch (const DecodeError&) {
    return Verdict::Malformed;
  }
  return verify(t);
}

Verdict Verifier::verify(const TransferTx& tx) {
  auto* pkey = impl_->key(tx.from);
  if (!pkey) return Verdict::Malformed;
  ByteView r(tx.signature.data(), 32), s(tx.signature.data() + 32, 32);
  if (zero(r) || zero(s)) return Verdict::BadSignature;
  auto der = der_signature(tx.signature);
  auto h = sha256(tx.preimage());
  PkeyCtxPtr ctx(EVP_PKEY_CTX_new(pkey, nullptr));
  check(ctx && EVP_PKEY_verify_init(ctx.get()) == 1, "verify init");
  return EVP_PKEY_verify(ctx.get(), der.data(), der.size(), h.bytes.data(), h.bytes.size()) == 1
             ? Verdict::Valid
             : Verdict::BadSignature;
}

Verdict verify_tx(const Transaction& tx) {
  thread_local Verifier v;
  return v.verify(tx);
}

VerifierPool::VerifierPool(std::size_t workers) {
  if (workers == 0) throw ConfigError("verifier pool needs at least one worker");
  for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this, i] { run(i); });
}

VerifierPool::~VerifierPool() {
  {
    std::lock_guard lk(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void VerifierPool::run(std::size_t) {
  Verifier v;
  for (;;) {
    std::function<void(Verifier&)> job;
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] { return stop_ || !jobs_.empty(); });
      if (jobs_.empty()) return;
      job = std::move(jobs_.front());
      jobs_.pop_front();
    }
    job(v);
  }
}

void VerifierPool::post(std::function<void(Verifier&)> job) {
  {
    std::lock_guard lk(mu_);
    jobs_.push_back(std::move(job));
  }
  cv_.notify_one();
}

std::vector<Verdict> VerifierPool::verify_all(const std::vector<Transaction>& txs) {
  std::vector<Verdict> out(txs.size(), Verdict::Malformed);
  if (txs.empty()) return out;
  auto chunks = std::min(threads_.size(), txs.size());
  auto per = (txs.size() + chunks - 1) / chunks;
  chunks = (txs.size() + per - 1) / per;
  std::latch done(static_cast<std::ptrdiff_t>(chunks));
  for (std::size_t c = 0; c < chunks; ++c) {
    auto lo = c * per, hi = std::min(txs.size(), lo + per);
    post([&, lo, hi](Verifier& v) {
      for (auto i = lo; i < hi; ++i) out[i] = v.verify(txs[i]);
      done.count_down();
    });
  }
  done.wait();
  return out;
}

void VerifierPool::verify_async(std::vector<Transaction> txs, Done done) {
  struct Shared {
    std::vector<Transaction> txs;
    std::vector<Verdict> verdicts;
    std::atomic<std::size_t> left;
    Done done;
  };
  if (txs.empty()) {
    done({}, {});
    return;
  }
  auto chunks = std::min(threads_.size(), txs.size());
  auto per = (txs.size() + chunks - 1) / chunks;
  chunks = (txs.size() + per - 1) / per;
  auto sh = std::make_shared<Shared>();
  sh->verdicts.assign(txs.size(), Verdict::Malformed);
  sh->txs = std::move(txs);
  sh->left = chunks;
  sh->done = std::move(done);
  for (std::size_t c = 0; c < chunks; ++c) {
    auto lo = c * per, hi = std::min(sh->txs.size(), lo + per);
    post([sh, lo, hi](Verifier& v) {
      for (auto i = lo; i < hi; ++i) sh->verdicts[i] = v.verify(sh->txs[i]);
      if (sh->left.fetch_sub(1) == 1) sh->done(std::move(sh->txs), std::move(sh->verdicts));
    });
  }
}

// Ledger state ---------------------------------------------------------------------------

const char* to_string(TxOutcome o) {
  switch (o) {
    case TxOutcome::Applied: return "applied";
    case TxOutcome::Malformed: return "malformed";
    case TxOutcome::BadSignature: return "bad_signature";
    case TxOutcome::StaleNonce: return "stale_nonce";
    case TxOutcome::InsufficientFunds: return "insufficient_funds";
  }
  return "unknown";
}

LedgerState::LedgerState(const std::vector<std::pair<PubKey, std::uint64_t>>& genesis) {
  for (const auto& [k, v] : genesis) {
    if (v > UINT64_MAX - genesis_total_) throw ConfigError("genesis total overflows");
    genesis_total_ += v;
    balances_[k] += v;
  }
}

LedgerState LedgerState::from_genesis(const KvFile& kv) {
  std::vector<std::pair<PubKey, std::uint64_t>> g;
  for (const auto& [k, v] : kv.entries()) {
    auto amount = std::stoull(v);
    g.emplace_back(pubkey_from_hex(k), amount);
  }
  return LedgerState(g);
}

std::uint64_t LedgerState::balance(const PubKey& k) const {
  auto it = balances_.find(k);
  return it == balances_.end() ? 0 : it->second;
}

std::uint64_t LedgerState::nonce(const PubKey& k) const {
  auto it = nonces_.find(k);
  return it == nonces_.end() ? 0 : it->second;
}

std::uint64_t LedgerState::total() const {
  std::uint64_t t = 0;
  for (const auto& [k, v] : balances_) t += v;
  return t;
}

TxOutcome LedgerState::apply(const Transaction& tx, Verdict verdict) {
  auto skip = [this](TxOutcome o) {
    ++skipped_;
    return o;
  };
  if (verdict == Verdict::Malformed) return skip(TxOutcome::Malformed);
  if (verdict == Verdict::BadSignature) return skip(TxOutcome::BadSignature);
  TransferTx t;
  try {
    t = TransferTx::decode(tx.payload());
  } catch (const DecodeError&) {
    return skip(TxOutcome::Malformed);
  }
  // Nonces are strictly sequential per sender, which also rejects replays.
  if (t.nonce != nonce(t.from) + 1) return skip(TxOutcome::StaleNonce);
  auto from = balances_.find(t.from);
  if (from == balances_.end() || from->second < t.amount) return skip(TxOutcome::InsufficientFunds);
  from->second -= t.amount;
  balances_[t.to] += t.amount;
  nonces_[t.from] = t.nonce;
  ++applied_;
  return TxOutcome::Applied;
}

std::vector<TxOutcome> LedgerState::apply_block(const std::vector<Transaction>& txs,
                                                const std::vector<Verdict>* verdicts) {
  if (verdicts && verdicts->size() != txs.size()) throw std::invalid_argument("one verdict per transaction");
  std::vector<TxOutcome> out;
  out.reserve(txs.size());
  for (std::size_t i = 0; i < txs.size(); ++i) out.push_back(apply(txs[i], verdicts ? (*verdicts)[i] : verify_tx(txs[i])));
  return out;
}

BatchDigest LedgerState::state_hash() const {
  Bytes buf;
  auto b = balances_.begin();
  auto n = nonces_.begin();
  while (b != balances_.end() || n != nonces_.end()) {
    const PubKey* k;
    if (n == nonces_.end() || (b != balances_.end() && b->first <= n->first))
      k = &b->first;
    else
      k = &n->first;
    std::uint64_t bal = 0, non = 0;
    if (b != balances_.end() && b->first == *k) bal = (b++)->second;
    if (n != nonces_.end() && n->first == *k) non = (n++)->second;
    be::put_bytes(buf, *k);
    be::put_u64(buf, bal);
    be::put_u64(buf, non);
  }
  return sha256(buf);
}

std::string LedgerState::to_csv() const {
  std::string out = "pubkey,balance\n";
  for (const auto& [k, v] : balances_) {
    out += to_hex(k);
    out += ',';
    out += std::to_string(v);
    out += '\n';
  }
  return out;
}

std::vector<Transaction> block_transactions(const std::vector<BatchPtr>& batches) {
  std::vector<Transaction> out;
  for (const auto& b : batches) out.insert(out.end(), b->txs.begin(), b->txs.end());
  return out;
}

// Block retrieval ----------------------------------------------------------------------------

Bytes select_block(const std::vector<Bytes>& responses, std::size_t f) {
  for (std::size_t i = 0; i < responses.size(); ++i) {
    auto copies = static_cast<std::size_t>(std::count(responses.begin(), responses.end(), responses[i]));
    if (copies >= f + 1) return responses[i];
  }
  throw NoQuorum("no block copy reached f+1 matching responses");
}

BlockFetch::BlockFetch(std::size_t n, std::size_t f, ReplicaId self, EpochId epoch)
    : n_(n), f_(f), self_(self), epoch_(epoch) {
  if (n < 3 * f + 1) throw ConfigError("block fetch needs n >= 3f + 1");
}

std::vector<ReplicaId> BlockFetch::targets(std::size_t attempt) const {
  std::vector<ReplicaId> others;
  for (std::size_t i = 1; i < n_; ++i) others.push_back(static_cast<ReplicaId>((self_ + i) % n_));
  std::vector<ReplicaId> out;
  auto want = std::min(2 * f_ + 1, others.size());
  for (std::size_t i = 0; i < want; ++i) out.push_back(others[(attempt * want + i) % others.size()]);
  return out;
}

void BlockFetch::start(Transport& net, std::size_t attempt) {
  asked_ = targets(attempt);
  responses_.clear();
  auto env = std::make_shared<const Envelope>(Envelope{epoch_, MsgKind::BlockReq, self_, {}});
  for (auto to : asked_) net.send(to, env);
}

std::optional<Block> BlockFetch::on_response(const Envelope& env) {
  if (env.kind != MsgKind::BlockResp || env.epoch != epoch_) return std::nullopt;
  if (std::find(asked_.begin(), asked_.end(), env.sender) == asked_.end()) return std::nullopt;
  if (!responses_.emplace(env.sender, env.payload).second) return std::nullopt;
  auto copies = static_cast<std::size_t>(std::count_if(responses_.begin(), responses_.end(),
                                                       [&](const auto& r) { return r.second == env.payload; }));
  if (copies < f_ + 1) return std::nullopt;
  try {
    auto block = Block::decode(env.payload);
    if (block.epoch != epoch_) return std::nullopt;
    return block;
  } catch (const DecodeError&) {
    return std::nullopt;
  }
}

void BlockFetch::on_timeout() const {
  std::vector<Bytes> copies;
  for (const auto& [from, bytes] : responses_) copies.push_back(bytes);
  select_block(copies, f_);
  throw NoQuorum("block fetch timed out before f+1 copies matched");
}

// Application ---------------------------------------------------------------------------------

LedgerApp::LedgerApp(Replica& replica, LedgerState genesis, VerifierPool* pool)
    : replica_(replica), state_(std::move(genesis)), pool_(pool) {
  replica_.on_commit([this](const CommittedEpoch& c, const std::vector<BatchPtr>& b) { on_commit(c, b); });
}

OfferResult LedgerApp::admit(const Transaction& tx) {
  if (verifier_.verify(tx) != Verdict::Valid) {
    ++rejected_;
    return OfferResult::Rejected;
  }
  auto res = replica_.submit(tx);
  if (res == OfferResult::Accepted) remember_valid(tx);
  return res;
}

void LedgerApp::remember_valid(const Transaction& tx) { known_valid_.insert(sha256(tx.payload())); }

void LedgerApp::on_commit(const CommittedEpoch& c, const std::vector<BatchPtr>& batches) {
  auto txs = block_transactions(batches);
  std::vector<Verdict> verdicts(txs.size(), Verdict::Valid);
  if (verify_) {
    std::vector<std::size_t> todo;
    std::vector<Transaction> check;
    for (std::size_t i = 0; i < txs.size(); ++i) {
      if (!known_valid_.empty() && known_valid_.erase(sha256(txs[i].payload())) > 0) {
        ++skipped_checks_;
        continue;
      }
      todo.push_back(i);
      check.push_back(txs[i]);
    }
    std::vector<Verdict> got;
    if (pool_) {
      got = pool_->verify_all(check);
    } else {
      for (const auto& t : check) got.push_back(verifier_.verify(t));
    }
    for (std::size_t k = 0; k < todo.size(); ++k) verdicts[todo[k]] = got[k];
  }
  last_outcomes_ = state_.apply_block(txs, &verdicts);
  ++blocks_;
  if (state_.total() != state_.genesis_total()) violated_ = true;
  if (block_fn_) block_fn_(c, txs, last_outcomes_);
}

}  // namespace dispel
