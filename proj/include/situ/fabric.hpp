#pragma once

/// @file fabric.hpp
/// @brief Simulated ranks and the message fabric between them.
///
/// Two clock modes share one worker-facing API:
///  - Virtual: discrete-event execution. One OS thread per rank, but exactly
///    one thread runs at a time under a strict handoff; an event queue keyed
///    (time, rank, per-rank sequence) decides who resumes next, so runs are
///    bit-deterministic.
///  - Real: free-running threads; compute sleeps, waits block on a condition
///    variable, timestamps derive from the wall clock.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <thread>
#include <vector>

#include "situ/datamodel.hpp"
#include "situ/report.hpp"

namespace situ {

enum class ClockKind { Virtual, Real };

// ---------------------------------------------------------------------------
// wire messages (fabric-internal, in-process)

inline constexpr int wire_version = 1;

enum class MsgKind { Ready, Ownership, PieceReq, Piece, QueryMore, More, AllDone, End, Bcast };

/// Per-dataset part advertised by one io-rank in an Ownership message.
struct OwnershipItem {
  std::string path;                 // literal dataset path
  DType dtype{};
  std::vector<uint64_t> extents;    // global extents
  Selection owned;                  // this io-rank's part (global coords)
  bool memory = true;               // part travels as pieces
  bool file = false;                // part is spilled to a container
  std::string container;            // container path when file == true
};

struct Message {
  MsgKind kind{};
  int src = -1, dst = -1;
  int channel = -1;
  int serve_seq = 0;                // serve cycle this message belongs to
  long timestep = -1;               // producer-side serve ordinal
  double send_time = 0, arrival = 0;
  uint64_t bytes = 0;               // payload bytes (Piece/Bcast)
  std::string filename;
  std::vector<OwnershipItem> items;                 // Ownership
  std::string path;                                  // PieceReq/Piece
  Selection sel;                                     // PieceReq/Piece (global coords)
  std::vector<std::byte> payload;                    // Piece
  std::vector<std::string> files;                    // More
  std::vector<std::pair<std::string, std::shared_ptr<const DataTree>>> trees;  // Bcast
};

// ---------------------------------------------------------------------------

class Fabric;

/// Thrown inside workers when the run is torn down early.
struct Aborted {};

/// Per-rank handle passed to worker functions.
class WorkerCtx {
public:
  WorkerCtx(Fabric& f, int rank) : fab_(f), rank_(rank) {}
  int rank() const { return rank_; }
  inline double now() const;

  /// Busy time: advances the local clock by @p d and logs a compute segment.
  inline void compute(double d, const std::string& label = "compute");

  /// Sends a message; transfer cost occupies this rank and delays arrival.
  inline void send(Message m);

  /// Blocks until a visible inbox message satisfies @p pred, then pops it.
  /// Visible means arrival <= now under the virtual clock.
  template <class P>
  Message receive(P&& pred, const char* why);

  /// Blocks until @p pred holds over shared state (channels etc.). Must not
  /// be called while holding the state mutex.
  template <class P>
  void wait(P&& pred, const char* why);

  Fabric& fabric() { return fab_; }

private:
  /// Scans the inbox for the best visible match; records the earliest
  /// not-yet-visible match in @p future_wake (virtual clock only).
  template <class P>
  std::optional<Message> scan_inbox(P& pred, std::optional<double>& future_wake);

  Fabric& fab_;
  int rank_;
};

/// The rank scheduler plus mailbox substrate. Engine-level protocol state is
/// guarded by state_mutex(); in virtual mode the strict handoff makes it
/// uncontended, in real mode it is load-bearing.
class Fabric {
public:
  struct Options {
    ClockKind clock = ClockKind::Virtual;
    double per_byte = 0;       // transfer cost per payload byte
    double latency = 0;        // fixed cost per costed message
    double real_unit_ms = 1;   // wall milliseconds per time unit (real clock)
  };

  using WorkerFn = std::function<void(WorkerCtx&)>;
  /// Inspects a message before mailbox delivery; returning true consumes it
  /// (the hook takes ownership by moving out of the reference).
  using DeliverHook = std::function<bool(Message&)>;

  explicit Fabric(Options opt) : opt_(opt) {}

  int add_worker(WorkerFn fn) {
    workers_.push_back(std::make_unique<Worker>());
    workers_.back()->fn = std::move(fn);
    return static_cast<int>(workers_.size()) - 1;
  }

  void set_deliver_hook(DeliverHook h) { deliver_hook_ = std::move(h); }

  std::recursive_mutex& state_mutex() { return state_; }

  /// Runs every worker to completion (or abort). Returns false on failure
  /// with the diagnostic in error().
  bool run() {
    if (opt_.clock == ClockKind::Virtual) run_virtual();
    else run_real();
    return !failed_;
  }

  const std::string& error() const { return error_; }

  // ---- logging (valid during run; engine reads afterwards) ----
  void log_event(Event e) {
    std::lock_guard<std::recursive_mutex> lk(state_);
    events_.push_back(std::move(e));
  }
  void log_segment(Segment s) {
    if (s.end <= s.start) return;
    std::lock_guard<std::recursive_mutex> lk(state_);
    segments_.push_back(std::move(s));
  }
  std::vector<Event>& events() { return events_; }
  std::vector<Segment>& segments() { return segments_; }

  double worker_now(int r) const { return workers_[r]->now; }
  int worker_count() const { return static_cast<int>(workers_.size()); }

  /// Delivery without a sending worker (service replies): the source rank is
  /// attributed but not occupied.
  void post(Message m, double at) {
    m.send_time = at;
    m.arrival = at + cost_of(m);
    deliver(std::move(m));
  }

  /// Wakes every blocked worker at time >= @p t so predicates recheck after
  /// an engine-state change. No-op on the real clock (notify_state covers it).
  void wake_blocked(double t) {
    if (opt_.clock != ClockKind::Virtual) return;
    std::lock_guard<std::mutex> lk(mu_);
    for (auto& wp : workers_) {
      Worker& w = *wp;
      if (w.state == Worker::St::Blocked)
        push_event(std::max(t, w.now), w.rank);
    }
  }

  void notify_state() { cv_state_.notify_all(); }

  /// Records the first failure and tears the run down.
  void fail(int rank, const std::string& msg) {
    {
      std::lock_guard<std::recursive_mutex> lk(state_);
      if (!failed_) {
        failed_ = true;
        error_ = rank >= 0 ? fmt::format("rank {}: {}", rank, msg) : msg;
      }
    }
    aborted_.store(true);
    cv_state_.notify_all();
  }

  bool aborted() const { return aborted_.load(); }
  ClockKind clock() const { return opt_.clock; }
  const Options& options() const { return opt_; }

  double real_now() const {
    auto dt = std::chrono::steady_clock::now() - t0_;
    double ms = std::chrono::duration<double, std::milli>(dt).count();
    return ms / opt_.real_unit_ms;
  }

private:
  friend class WorkerCtx;

  struct Worker {
    int rank = -1;
    WorkerFn fn;
    std::thread th;
    std::condition_variable cv;  // targeted handoff wakeup (virtual clock)
    double now = 0;
    uint64_t seq = 0;      // per-rank event sequence (spec tiebreak)
    uint64_t gen = 0;      // bumped on every resume; stale events die
    enum class St { Ready, Running, Blocked, Done } state = St::Ready;
    const char* why = "";  // what a blocked worker waits for
    double resume_time = 0;
    std::deque<Message> inbox;
  };

  struct Ev {
    double t;
    int rank;
    uint64_t seq;
    uint64_t gen;
    bool operator>(const Ev& o) const {
      if (t != o.t) return t > o.t;
      if (rank != o.rank) return rank > o.rank;
      return seq > o.seq;
    }
  };

  Options opt_;
  std::vector<std::unique_ptr<Worker>> workers_;
  DeliverHook deliver_hook_;

  // scheduler bookkeeping (virtual clock); cv_ is waited on by the
  // scheduler only, each worker sleeps on its own Worker::cv so a handoff
  // wakes exactly one thread regardless of rank count
  std::mutex mu_;
  std::condition_variable cv_;
  std::priority_queue<Ev, std::vector<Ev>, std::greater<Ev>> q_;
  int running_ = -1;  // -1: scheduler holds the token

  // shared engine state + mailboxes
  std::recursive_mutex state_;
  std::condition_variable_any cv_state_;

  std::vector<Event> events_;
  std::vector<Segment> segments_;
  std::atomic<bool> aborted_{false};
  bool failed_ = false;
  std::string error_;
  std::chrono::steady_clock::time_point t0_;

  double cost_of(const Message& m) const {
    if (m.bytes == 0 && opt_.latency == 0) return 0;
    return opt_.latency + opt_.per_byte * static_cast<double>(m.bytes);
  }

  // -- must hold mu_ --
  void push_event(double t, int rank) {
    Worker& w = *workers_[rank];
    q_.push(Ev{t, rank, w.seq++, w.gen});
  }

  void deliver(Message&& m) {
    std::lock_guard<std::recursive_mutex> lk(state_);
    if (deliver_hook_ && deliver_hook_(m)) return;
    Worker& w = *workers_[m.dst];
    const double arrival = m.arrival;
    w.inbox.push_back(std::move(m));
    if (opt_.clock == ClockKind::Virtual) {
      std::lock_guard<std::mutex> lk2(mu_);
      if (w.state == Worker::St::Blocked) push_event(std::max(arrival, w.now), w.rank);
    } else {
      cv_state_.notify_all();
    }
  }

  // ---- virtual clock ----

  void run_virtual() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      for (auto& wp : workers_) {
        wp->rank = static_cast<int>(&wp - workers_.data());
        push_event(0.0, wp->rank);
      }
    }
    for (auto& wp : workers_) {
      Worker* w = wp.get();
      w->th = std::thread([this, w] { thread_main(*w); });
    }
    scheduler_loop();
    for (auto& wp : workers_) wp->th.join();
  }

  void thread_main(Worker& w) {
    {
      std::unique_lock<std::mutex> lk(mu_);
      w.cv.wait(lk, [&] { return running_ == w.rank; });
      w.state = Worker::St::Running;
    }
    WorkerCtx ctx(*this, w.rank);
    try {
      if (aborted_.load()) throw Aborted{};
      w.fn(ctx);
    } catch (const Aborted&) {
    } catch (const std::exception& e) {
      fail(w.rank, e.what());
    }
    std::lock_guard<std::mutex> lk(mu_);
    w.state = Worker::St::Done;
    running_ = -1;
    cv_.notify_one();
  }

  void scheduler_loop() {
    std::unique_lock<std::mutex> lk(mu_);
    while (true) {
      cv_.wait(lk, [&] { return running_ == -1; });
      if (aborted_.load()) break;
      // drop stale events
      while (!q_.empty()) {
        const Ev& e = q_.top();
        Worker& w = *workers_[e.rank];
        if (w.state == Worker::St::Done || e.gen != w.gen) q_.pop();
        else break;
      }
      if (q_.empty()) {
        bool all_done = true;
        for (auto& wp : workers_) all_done &= wp->state == Worker::St::Done;
        if (all_done) return;
        diagnose_deadlock();
        break;
      }
      Ev e = q_.top();
      q_.pop();
      Worker& w = *workers_[e.rank];
      w.gen++;
      w.resume_time = e.t;
      running_ = e.rank;
      w.cv.notify_one();
    }
    // abort path: unwind the remaining workers one at a time
    while (true) {
      Worker* next = nullptr;
      for (auto& wp : workers_)
        if (wp->state != Worker::St::Done) { next = wp.get(); break; }
      if (!next) return;
      next->gen++;
      next->resume_time = next->now;
      running_ = next->rank;
      next->cv.notify_one();
      cv_.wait(lk, [&] { return running_ == -1; });
    }
  }

  void diagnose_deadlock() {
    std::string msg = "deadlock: no runnable rank;";
    for (auto& wp : workers_)
      if (wp->state == Worker::St::Blocked)
        msg += fmt::format(" rank {} blocked on {};", wp->rank, wp->why);
    fail(-1, msg);
    aborted_.store(true);
  }

  /// Suspends the running worker until its own event at time @p t.
  void yield_self(Worker& w, double t) {
    std::unique_lock<std::mutex> lk(mu_);
    if (aborted_.load()) throw Aborted{};
    push_event(t, w.rank);
    w.state = Worker::St::Ready;
    running_ = -1;
    cv_.notify_one();
    w.cv.wait(lk, [&] { return running_ == w.rank; });
    if (aborted_.load()) { w.state = Worker::St::Running; throw Aborted{}; }
    w.state = Worker::St::Running;
    w.now = std::max(w.now, w.resume_time);
  }

  /// Parks the running worker; an optional self-wake fires at @p wake_t.
  void block_self(Worker& w, const char* why, std::optional<double> wake_t) {
    std::unique_lock<std::mutex> lk(mu_);
    if (aborted_.load()) throw Aborted{};
    if (wake_t) push_event(std::max(*wake_t, w.now), w.rank);
    w.state = Worker::St::Blocked;
    w.why = why;
    running_ = -1;
    cv_.notify_one();
    w.cv.wait(lk, [&] { return running_ == w.rank; });
    if (aborted_.load()) { w.state = Worker::St::Running; throw Aborted{}; }
    w.state = Worker::St::Running;
    w.now = std::max(w.now, w.resume_time);
  }

  // ---- real clock ----

  void run_real() {
    t0_ = std::chrono::steady_clock::now();
    for (auto& wp : workers_) {
      wp->rank = static_cast<int>(&wp - workers_.data());
      Worker* w = wp.get();
      w->th = std::thread([this, w] {
        WorkerCtx ctx(*this, w->rank);
        try {
          w->fn(ctx);
        } catch (const Aborted&) {
        } catch (const std::exception& e) {
          fail(w->rank, e.what());
        }
        w->state = Worker::St::Done;
        cv_state_.notify_all();
      });
    }
    for (auto& wp : workers_) wp->th.join();
  }
};

// ---------------------------------------------------------------------------
// WorkerCtx implementation

inline double WorkerCtx::now() const { return fab_.workers_[rank_]->now; }

inline void WorkerCtx::compute(double d, const std::string& label) {
  if (d < 0) throw Error("compute: negative duration");
  Fabric::Worker& w = *fab_.workers_[rank_];
  if (fab_.clock() == ClockKind::Virtual) {
    double t0 = w.now;
    fab_.log_segment({Segment::Kind::Compute, rank_, t0, t0 + d, label});
    if (d == 0) return;
    fab_.yield_self(w, t0 + d);
  } else {
    if (fab_.aborted()) throw Aborted{};
    double t0 = fab_.real_now();
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(
        d * fab_.options().real_unit_ms));
    w.now = fab_.real_now();
    fab_.log_segment({Segment::Kind::Compute, rank_, t0, w.now, label});
  }
}

inline void WorkerCtx::send(Message m) {
  Fabric::Worker& w = *fab_.workers_[rank_];
  m.src = rank_;
  const double cost = fab_.cost_of(m);
  if (fab_.clock() == ClockKind::Virtual) {
    if (cost > 0) {
      // the sending rank is occupied while the payload is on the wire
      fab_.log_segment({Segment::Kind::Transfer, rank_, w.now, w.now + cost, "send"});
      fab_.yield_self(w, w.now + cost);
    }
    m.send_time = w.now - cost;
    m.arrival = w.now;
  } else {
    m.send_time = fab_.real_now();
    m.arrival = m.send_time;  // delivery is immediate; cost informational
    w.now = m.arrival;
  }
  fab_.deliver(std::move(m));
}

template <class P>
std::optional<Message> WorkerCtx::scan_inbox(P& pred, std::optional<double>& future_wake) {
  Fabric::Worker& w = *fab_.workers_[rank_];
  int best = -1;
  for (size_t i = 0; i < w.inbox.size(); ++i) {
    const Message& m = w.inbox[i];
    if (!pred(m)) continue;
    if (fab_.clock() == ClockKind::Virtual && m.arrival > w.now) {
      if (!future_wake || m.arrival < *future_wake) future_wake = m.arrival;
      continue;
    }
    if (best < 0 || m.arrival < w.inbox[best].arrival) best = static_cast<int>(i);
  }
  if (best < 0) return std::nullopt;
  Message out = std::move(w.inbox[best]);
  w.inbox.erase(w.inbox.begin() + best);
  return out;
}

template <class P>
Message WorkerCtx::receive(P&& pred, const char* why) {
  Fabric::Worker& w = *fab_.workers_[rank_];
  if (fab_.clock() == ClockKind::Real) {
    std::unique_lock<std::recursive_mutex> lk(fab_.state_);
    const double t0 = fab_.real_now();
    std::optional<Message> got;
    std::optional<double> dummy;
    fab_.cv_state_.wait(lk, [&] {
      if (fab_.aborted()) return true;
      got = scan_inbox(pred, dummy);
      return got.has_value();
    });
    if (!got) throw Aborted{};
    w.now = fab_.real_now();
    fab_.log_segment({Segment::Kind::Idle, rank_, t0, w.now, why});
    return std::move(*got);
  }
  const double t0 = w.now;
  while (true) {
    std::optional<double> future_wake;
    {
      std::lock_guard<std::recursive_mutex> lk(fab_.state_);
      if (auto got = scan_inbox(pred, future_wake)) {
        fab_.log_segment({Segment::Kind::Idle, rank_, t0, w.now, why});
        return std::move(*got);
      }
    }
    fab_.block_self(w, why, future_wake);
  }
}

template <class P>
void WorkerCtx::wait(P&& pred, const char* why) {
  Fabric::Worker& w = *fab_.workers_[rank_];
  if (fab_.clock() == ClockKind::Real) {
    std::unique_lock<std::recursive_mutex> lk(fab_.state_);
    const double t0 = fab_.real_now();
    fab_.cv_state_.wait(lk, [&] { return fab_.aborted() || pred(); });
    if (fab_.aborted()) throw Aborted{};
    w.now = fab_.real_now();
    fab_.log_segment({Segment::Kind::Idle, rank_, t0, w.now, why});
    return;
  }
  const double t0 = w.now;
  while (true) {
    {
      std::lock_guard<std::recursive_mutex> lk(fab_.state_);
      if (pred()) {
        fab_.log_segment({Segment::Kind::Idle, rank_, t0, w.now, why});
        return;
      }
    }
    fab_.block_self(w, why, std::nullopt);
  }
}

}  // namespace situ
