//! Scoped-thread work splitting for batch math.
//!
//! Work is always partitioned along the outermost axis of the output buffer,
//! and every output element is accumulated in a fixed inner order, so results
//! are bit-identical for any thread count. `--deterministic` therefore only
//! pins the thread count; it never changes numerics.

/// Thread budget for forward/backward loops.
#[derive(Debug, Clone, Copy)]
pub struct Parallelism {
    pub threads: usize,
}

impl Parallelism {
    pub fn single() -> Self {
        Parallelism { threads: 1 }
    }

    /// Resolve from the `PTD_THREADS` env var, the machine, and the
    /// deterministic flag (which forces a single thread).
    pub fn resolve(deterministic: bool) -> Self {
        if deterministic {
            return Self::single();
        }
        let env_cap = std::env::var("PTD_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1);
        let hw = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        Parallelism {
            threads: env_cap.unwrap_or(hw).min(hw).max(1),
        }
    }

    /// Split `out` into `n_chunks` pieces of `chunk_len` and run `f(chunk_index, piece)`
    /// on each, spreading pieces across threads. `out.len()` must equal
    /// `n_chunks * chunk_len`.
    pub fn for_chunks<T: Send>(
        &self,
        out: &mut [T],
        chunk_len: usize,
        f: impl Fn(usize, &mut [T]) + Sync,
    ) {
        if chunk_len == 0 {
            return;
        }
        debug_assert_eq!(out.len() % chunk_len, 0);
        let n_chunks = out.len() / chunk_len;
        if self.threads <= 1 || n_chunks <= 1 {
            for (i, piece) in out.chunks_mut(chunk_len).enumerate() {
                f(i, piece);
            }
            return;
        }
        let workers = self.threads.min(n_chunks);
        // Contiguous block per worker keeps chunk order stable within a worker.
        let per = n_chunks.div_ceil(workers);
        std::thread::scope(|scope| {
            let f = &f;
            let mut rest = out;
            let mut start = 0usize;
            while start < n_chunks {
                let take = per.min(n_chunks - start);
                let (piece, tail) = rest.split_at_mut(take * chunk_len);
                rest = tail;
                let base = start;
                scope.spawn(move || {
                    for (j, chunk) in piece.chunks_mut(chunk_len).enumerate() {
                        f(base + j, chunk);
                    }
                });
                start += take;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_map_matches_sequential() {
        let mut seq = vec![0u64; 40];
        let mut par = vec![0u64; 40];
        let fill = |i: usize, piece: &mut [u64]| {
            for (j, v) in piece.iter_mut().enumerate() {
                *v = (i * 1000 + j) as u64;
            }
        };
        Parallelism::single().for_chunks(&mut seq, 5, fill);
        Parallelism { threads: 3 }.for_chunks(&mut par, 5, fill);
        assert_eq!(seq, par);
    }
}
