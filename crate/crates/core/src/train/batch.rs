use crate::data::PreparedRecord;
use crate::error::{Error, Result};

/// Greedy length-bucketed packing: records are stably ordered by token
/// count (longest first) and a batch is closed once padding every member
/// to the longest would exceed `max_tokens`. Returns index batches into
/// the input slice.
pub fn batch_by_tokens(records: &[PreparedRecord], max_tokens: usize) -> Result<Vec<Vec<usize>>> {
    if max_tokens == 0 {
        return Err(Error::config(
            "batch_by_tokens: max_tokens must be positive",
        ));
    }
    for r in records {
        if r.token_count() > max_tokens {
            return Err(Error::data(format!(
                "record {} has {} tokens, above the batch limit {}",
                r.id,
                r.token_count(),
                max_tokens
            )));
        }
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].token_count().cmp(&records[a].token_count()));

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_max = 0usize;
    for idx in order {
        let len = records[idx].token_count();
        let padded = (current.len() + 1) * current_max.max(len);
        if current.is_empty() || padded <= max_tokens {
            current_max = current_max.max(len);
            current.push(idx);
        } else {
            batches.push(std::mem::take(&mut current));
            current.push(idx);
            current_max = len;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}
