use std::collections::BTreeSet;

use forge_core::corpus::{clean_note, consolidate, CleaningRules, NoteRow};
use forge_core::dates::DateRecognizer;
use forge_core::eval::{metrics, ConfusionCounts};
use forge_core::extract::{reconcile, PartialOutput, ResultStatus};
use forge_core::schema::{compile_tool, parse_tool_document, validate_output, DType, FieldSpec, ToolSpec, Verdict};
use forge_core::testkit::{conforming_instance, mutate, random_tool, GenConfig};
use forge_core::text::{chunk_spans, chunk_text, estimate_tokens, CHARS_PER_TOKEN};
use forge_core::vector::{l2_norm, l2_normalize, ChunkMeta, FlatIndex, NORM_TOLERANCE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_tools_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_tool(&mut rng, 0, &GenConfig::default());
        let doc = compile_tool(&spec).unwrap();
        let again = compile_tool(&spec.clone()).unwrap();
        prop_assert_eq!(doc.as_str(), again.as_str());
        let back = parse_tool_document(&doc).unwrap();
        prop_assert!(back.same_structure(&spec), "{:?}\n{:?}", back, spec);
    }

    #[test]
    fn mutations_get_expected_verdict(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_tool(&mut rng, 1, &GenConfig::default());
        let doc = compile_tool(&spec).unwrap();
        let inst = conforming_instance(&mut rng, &spec);
        prop_assert_eq!(validate_output(&doc, &inst).verdict, Verdict::Valid);
        if let Some(m) = mutate(&mut rng, &spec, &inst) {
            let report = validate_output(&doc, &m.instance);
            prop_assert_eq!(report.verdict, m.expected, "{:?} at {}: {}", m.kind, m.pointer, m.instance);
        }
    }

    #[test]
    fn chunks_cover_in_order(len in 0usize..3000, window in 1usize..64, overlap_frac in 0.0f64..1.0) {
        let overlap = ((window as f64) * overlap_frac) as usize % window;
        let spans = chunk_spans(len, window, overlap).unwrap();
        let mut covered = 0;
        for (i, s) in spans.iter().enumerate() {
            prop_assert!(s.start < s.end && s.end <= len);
            prop_assert!(s.start <= covered, "gap before {}", s.start);
            covered = covered.max(s.end);
            prop_assert!(s.len().div_ceil(CHARS_PER_TOKEN) <= window);
            if i > 0 {
                let prev = spans[i - 1];
                prop_assert!(prev.start < s.start);
                prop_assert_eq!(prev.end - s.start, overlap * CHARS_PER_TOKEN);
            }
        }
        prop_assert_eq!(covered, len);
    }

    #[test]
    fn chunk_text_respects_char_boundaries(text in "\\PC{0,400}", window in 1usize..20) {
        let chunks = chunk_text(&text, window, 0).unwrap();
        let joined: String = chunks.iter().map(|c| c.text).collect();
        prop_assert_eq!(joined, text.clone());
        for c in &chunks {
            prop_assert!(estimate_tokens(c.text) <= window);
        }
    }

    #[test]
    fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-1e6f32..1e6, 1..64)) {
        prop_assume!(v.iter().any(|x| *x != 0.0));
        let u = l2_normalize(&v).unwrap();
        prop_assert!((l2_norm(u.as_slice()) - 1.0).abs() <= NORM_TOLERANCE);
    }

    #[test]
    fn search_is_monotone_in_threshold(seed in any::<u64>(), t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let n = 40;
        let vectors: Vec<_> = (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                l2_normalize(&v).unwrap()
            })
            .collect();
        let meta = (0..n as u32)
            .map(|i| ChunkMeta { chunk_id: i, entry_id: i / 4, char_start: 0, char_end: 1 })
            .collect();
        let index = FlatIndex::build("m", dim, vectors, meta).unwrap();
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let q = l2_normalize(&q).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let ids = |t| index.search(&q, t).unwrap().into_iter().map(|h| h.chunk_id).collect::<BTreeSet<_>>();
        prop_assert!(ids(hi).is_subset(&ids(lo)));
        prop_assert_eq!(ids(-1.0 - 1e-6).len(), n);
        prop_assert!(ids(1.0 + 1e-5).is_empty());
    }

    #[test]
    fn metrics_swap_and_scale(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, k in 1u64..50) {
        let c = ConfusionCounts::new(tp, tn, fp, fn_);
        prop_assume!(c.total() > 0);
        let m = metrics(&c).unwrap();
        let t = metrics(&c.transposed()).unwrap();
        prop_assert_eq!(m.accuracy, t.accuracy);
        prop_assert!((m.precision - t.recall).abs() < 1e-12);
        prop_assert!((m.f1 - t.f1).abs() < 1e-12);
        let s = metrics(&ConfusionCounts::new(tp * k, tn * k, fp * k, fn_ * k)).unwrap();
        for (a, b) in [(m.precision, s.precision), (m.recall, s.recall), (m.f1, s.f1), (m.accuracy, s.accuracy)] {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for x in [m.precision, m.recall, m.f1, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn cleaning_is_idempotent(
        parts in prop::collection::vec(
            prop_oneof![
                Just("<meta>x</meta>".to_string()),
                Just("<metadata a=\"1\">\n<k>v</k>\n</metadata>".to_string()),
                Just("*** SYSTEM GENERATED ***\n".to_string()),
                Just("Page 2 of 9\n".to_string()),
                Just("Electronically signed by Dr. X\n".to_string()),
                "[a-z .]{0,20}",
                Just("\n".to_string()),
                Just("<me".to_string()),
                Just("ta>".to_string()),
            ],
            0..12,
        )
    ) {
        let rules = CleaningRules::defaults();
        let text: String = parts.concat();
        let once = clean_note(&text, &rules);
        prop_assert_eq!(clean_note(&once, &rules), once);
    }

    #[test]
    fn consolidate_sorts_stably(days in prop::collection::vec(prop::option::of(0u32..20), 0..15)) {
        let base = chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let rows: Vec<NoteRow> = days
            .iter()
            .enumerate()
            .map(|(i, d)| NoteRow {
                mrn: "M".into(),
                timestamp: d.map(|d| base + chrono::Duration::days(d as i64)),
                source_system: "s".into(),
                category: "c".into(),
                text: format!("note {i}"),
            })
            .collect();
        let report = consolidate("M", &rows, &CleaningRules::empty());
        let mut expect: Vec<usize> = (0..rows.len()).collect();
        expect.sort_by_key(|&i| (rows[i].timestamp.is_none(), rows[i].timestamp, i));
        let got: Vec<usize> = report.entries.iter().map(|e| e.entry_id as usize).collect();
        prop_assert_eq!(got, expect);
    }
}

fn occurrence_tool() -> ToolSpec {
    ToolSpec::new(
        "stroke",
        "Stroke history",
        vec![
            FieldSpec::new("Occurrence", DType::Boolean).required(),
            FieldSpec::new("Date", DType::String).with_pattern(r"^\d{4}(-\d{2}(-\d{2})?)?$"),
        ],
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconcile_or_and_earliest_ignore_chunk_order(
        values in prop::collection::vec((any::<bool>(), prop::option::of((1990i32..2030, 1u32..13, 1u32..29))), 4)
    ) {
        let doc = compile_tool(&occurrence_tool()).unwrap();
        let dates = DateRecognizer::new();
        let parts: Vec<_> = values
            .iter()
            .map(|(occ, date)| match date {
                Some((y, m, d)) => json!({"Occurrence": occ, "Date": format!("{y:04}-{m:02}-{d:02}")}),
                None => json!({"Occurrence": occ}),
            })
            .collect();
        let mut first = None;
        for perm in permutations(4) {
            let partials: Vec<_> = perm
                .iter()
                .enumerate()
                .map(|(chunk, &src)| PartialOutput::from_value(chunk, parts[src].clone(), &doc, 1))
                .collect();
            let merged = reconcile(&partials, &doc, &dates);
            prop_assert_eq!(merged.status, ResultStatus::Found);
            prop_assert!(validate_output(&doc, &merged.value).is_valid());
            match &first {
                None => first = Some(merged.value),
                Some(v) => prop_assert_eq!(v, &merged.value),
            }
        }
        let merged = first.unwrap();
        prop_assert_eq!(&merged["Occurrence"], &json!(values.iter().any(|(o, _)| *o)));
        let earliest = values.iter().filter_map(|(_, d)| *d).min();
        match earliest {
            Some((y, m, d)) => prop_assert_eq!(&merged["Date"], &json!(format!("{y:04}-{m:02}-{d:02}"))),
            None => prop_assert!(merged.get("Date").is_none()),
        }
    }
}
