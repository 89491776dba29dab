use super::ControlError;
use crate::pipeline::Prefix;

/// One past the largest event number.
pub const EVENT_SPACE_END: u128 = 1 << 64;

/// Decomposes `[start, end_exclusive)` into the minimal set of disjoint
/// prefixes whose union is exactly that range.
///
/// `end_exclusive` may be `1 << 64` for an open-ended range. Walks upward
/// from `start`, each time taking the largest aligned block that fits.
pub fn range_to_prefixes(start: u64, end_exclusive: u128) -> Result<Vec<Prefix>, ControlError> {
    if u128::from(start) >= end_exclusive || end_exclusive > EVENT_SPACE_END {
        return Err(ControlError::EmptyRange {
            start,
            end: end_exclusive,
        });
    }
    let mut out = Vec::new();
    let mut cur = u128::from(start);
    while cur < end_exclusive {
        let align = if cur == 0 { 64 } else { cur.trailing_zeros().min(64) };
        let span = (end_exclusive - cur).ilog2();
        let bits = align.min(span);
        let len = (64 - bits) as u8;
        out.push(Prefix::new(cur as u64, len).expect("aligned by construction"));
        cur += 1u128 << bits;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Membership by brute force over a small embedded space.
    fn covered(prefixes: &[Prefix], key: u64) -> usize {
        prefixes.iter().filter(|p| p.contains(key)).count()
    }

    #[test]
    fn whole_space_is_wildcard() {
        assert_eq!(
            range_to_prefixes(0, EVENT_SPACE_END).unwrap(),
            vec![Prefix::WILDCARD]
        );
    }

    #[test]
    fn aligned_power_of_two() {
        for k in [0u32, 1, 9, 32, 63] {
            assert_eq!(
                range_to_prefixes(0, 1u128 << k).unwrap(),
                vec![Prefix::new(0, (64 - k) as u8).unwrap()]
            );
        }
    }

    #[test]
    fn epoch_example_range() {
        let got = range_to_prefixes(1900, 1930).unwrap();
        // 1900..1904 /62, 1904..1920 /60, 1920..1928 /61, 1928..1930 /63
        let expect = vec![
            Prefix::new(1900, 62).unwrap(),
            Prefix::new(1904, 60).unwrap(),
            Prefix::new(1920, 61).unwrap(),
            Prefix::new(1928, 63).unwrap(),
        ];
        assert_eq!(got, expect);
        for key in 0..=u16::MAX as u64 {
            let inside = (1900..1930).contains(&key);
            assert_eq!(covered(&got, key), usize::from(inside), "key {key}");
        }
    }

    #[test]
    fn top_of_space() {
        let got = range_to_prefixes(u64::MAX, EVENT_SPACE_END).unwrap();
        assert_eq!(got, vec![Prefix::new(u64::MAX, 64).unwrap()]);
        let got = range_to_prefixes(1, EVENT_SPACE_END).unwrap();
        assert_eq!(got.len(), 64);
    }

    #[test]
    fn worst_case_size() {
        let got = range_to_prefixes(1, EVENT_SPACE_END - 1).unwrap();
        assert_eq!(got.len(), 2 * 64 - 2);
    }

    #[test]
    fn empty_range_rejected() {
        assert!(matches!(
            range_to_prefixes(5, 5),
            Err(ControlError::EmptyRange { .. })
        ));
        assert!(matches!(
            range_to_prefixes(6, 5),
            Err(ControlError::EmptyRange { .. })
        ));
        assert!(range_to_prefixes(0, EVENT_SPACE_END + 1).is_err());
    }

    /// Minimal-cover oracle: a range is covered by k aligned blocks where k
    /// is found by exhaustive dynamic programming over a 10-bit space.
    fn min_blocks(start: u64, end: u64) -> usize {
        let n = end as usize;
        let mut best = vec![usize::MAX; n + 1];
        best[start as usize] = 0;
        for pos in start as usize..n {
            if best[pos] == usize::MAX {
                continue;
            }
            for bits in 0..=10u32 {
                let size = 1usize << bits;
                if pos % size != 0 || pos + size > n {
                    continue;
                }
                best[pos + size] = best[pos + size].min(best[pos] + 1);
            }
        }
        best[n]
    }

    #[test]
    fn minimal_against_dp_oracle() {
        for start in 0..64u64 {
            for end in start + 1..=200u64 {
                let got = range_to_prefixes(start, u128::from(end)).unwrap();
                assert_eq!(got.len(), min_blocks(start, end), "[{start},{end})");
            }
        }
    }

    proptest! {
        #[test]
        fn disjoint_cover(start in any::<u64>(), span in 1u128..(1u128 << 64)) {
            let end = (u128::from(start) + span).min(EVENT_SPACE_END);
            let got = range_to_prefixes(start, end).unwrap();
            prop_assert!(got.len() <= 126 || got == vec![Prefix::WILDCARD]);
            let mut total = 0u128;
            let mut next = u128::from(start);
            for p in &got {
                prop_assert_eq!(u128::from(p.first()), next);
                next += p.size();
                total += p.size();
            }
            prop_assert_eq!(total, end - u128::from(start));
            for (i, a) in got.iter().enumerate() {
                for b in &got[i + 1..] {
                    prop_assert!(!a.overlaps(b));
                }
            }
        }
    }
}
