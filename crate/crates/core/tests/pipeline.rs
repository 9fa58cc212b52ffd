use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;

use cdrbench::corpus::{generate_synthetic, DomainDataset, SyntheticSpec};
use cdrbench::harness::{self, DataSource, DomainFiles, ExperimentConfig};
use cdrbench::llm::{NoiseConfig, ProviderConfig, ProviderKind};
use cdrbench::{FilterConfig, TaskGenConfig};

fn write_gz(path: &Path, lines: impl Iterator<Item = String>) {
    let mut gz = GzEncoder::new(std::fs::File::create(path).unwrap(), Compression::fast());
    for line in lines {
        writeln!(gz, "{line}").unwrap();
    }
    gz.finish().unwrap();
}

/// Dump a dataset in the review/metadata line format.
fn export(dataset: &DomainDataset, dir: &Path, name: &str) -> DomainFiles {
    let reviews = dir.join(format!("{name}.json.gz"));
    let metadata = dir.join(format!("meta_{name}.json.gz"));
    write_gz(
        &reviews,
        dataset.interactions.iter().map(|i| {
            serde_json::json!({
                "reviewerID": i.user_id, "asin": i.item_id, "overall": i.rating,
                "unixReviewTime": i.timestamp, "reviewText": "fine",
            })
            .to_string()
        }),
    );
    write_gz(
        &metadata,
        dataset
            .catalog
            .iter()
            .map(|(asin, title)| serde_json::json!({"asin": asin, "title": title, "price": "$1"}).to_string()),
    );
    DomainFiles {
        reviews,
        metadata,
        domain_id: dataset.domain_id.clone(),
        group_id: Some("synthetic".into()),
    }
}

fn files_config(dir: &Path) -> ExperimentConfig {
    let mut spec = SyntheticSpec::new(80, 200, 2, 4);
    spec.interactions_per_user = (30, 45);
    let domains = generate_synthetic(&spec).unwrap();
    let source = export(&domains[0], dir, "src");
    let target = export(&domains[1], dir, "tgt");
    ExperimentConfig {
        data: DataSource::Files { source, target },
        filter: FilterConfig {
            rating_floor: 4.0,
            min_user_purchases: 5,
            min_item_buyers: 1,
            history_len_threshold: 8,
            n_ground_truth: 3,
        },
        taskgen: TaskGenConfig {
            history_len: 8,
            candidate_size: 15,
            ..TaskGenConfig::default()
        },
        max_users: Some(25),
        output_dir: dir.join("run"),
        ..ExperimentConfig::default()
    }
}

#[test]
fn gzip_dumps_round_trip_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(20, 50, 1, 1);
    let original = generate_synthetic(&spec).unwrap().remove(0);
    let files = export(&original, dir.path(), "d");
    let (loaded, stats, meta) = harness::ingest(&files).unwrap();
    assert_eq!(stats.skipped_lines, 0);
    assert_eq!(meta.dropped_interactions, 0);
    let mut a = original.interactions.clone();
    let mut b = loaded.interactions.clone();
    a.sort_by(|x, y| (&x.user_id, x.timestamp, &x.item_id).cmp(&(&y.user_id, y.timestamp, &y.item_id)));
    b.sort_by(|x, y| (&x.user_id, x.timestamp, &x.item_id).cmp(&(&y.user_id, y.timestamp, &y.item_id)));
    assert_eq!(a, b);
    let bought = original.items();
    let catalog: Vec<_> = original.catalog.iter().filter(|(k, _)| bought.contains(k.as_str())).collect();
    assert_eq!(catalog, loaded.catalog.iter().collect::<Vec<_>>());
}

#[test]
fn format_noise_does_not_move_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = files_config(dir.path());
    config.provider = ProviderConfig {
        noise: NoiseConfig::format_only(),
        seed: 2,
        ..ProviderConfig::of_kind(ProviderKind::Adversarial)
    };
    let out = harness::run_experiment(&config).unwrap();
    for v in &out.variants {
        assert!(v.ledger.is_conserved());
        assert!(v.report.mean.0.iter().all(|&x| x == 1.0), "{:?}", v.report.mean);
        assert!(v.report.mismatch.format_fixes > 0);
        assert_eq!(v.report.mismatch.missing_rate, 0.0);
    }
    assert_eq!(out.manifest.domain_gap, "same-group");
}

#[test]
fn refusals_are_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = files_config(dir.path());
    config.provider = ProviderConfig {
        noise: NoiseConfig {
            refusal_prob: 0.4,
            ..NoiseConfig::default()
        },
        seed: 8,
        ..ProviderConfig::of_kind(ProviderKind::Adversarial)
    };
    let out = harness::run_experiment(&config).unwrap();
    for v in &out.variants {
        let m = v.report.mismatch;
        assert!(v.ledger.is_conserved());
        assert!(m.refusals > 0);
        assert_eq!(v.report.n_skipped, m.refusals);
        assert!(v.report.mean.0.iter().all(|&x| x == 1.0));
    }
}

#[test]
fn custom_refusal_rules_and_templates_apply() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = files_config(dir.path());
    let rules = dir.path().join("refusals.txt");
    std::fs::write(&rules, "# one phrase per line\ndeluxe edition\n").unwrap();
    let templates = dir.path().join("templates");
    std::fs::create_dir(&templates).unwrap();
    std::fs::write(templates.join("adaptation.txt"), "Recommend {TARGET} items.").unwrap();
    config.parse.refusals_file = Some(rules);
    config.prompt.templates_dir = Some(templates);
    config.provider = ProviderConfig {
        noise: NoiseConfig {
            paraphrase_prob: 0.05,
            ..NoiseConfig::default()
        },
        seed: 1,
        ..ProviderConfig::of_kind(ProviderKind::Adversarial)
    };
    let out = harness::run_experiment(&config).unwrap();
    assert!(out.variants.iter().any(|v| v.report.mismatch.refusals > 0));
    let key = std::fs::read_dir(dir.path().join("run/cache")).unwrap().count();
    assert!(key > 0);
}

#[test]
fn separate_guidance_model_is_used_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = files_config(dir.path());
    config.guidance_provider = Some(ProviderConfig {
        model: Some("guide-model".into()),
        ..ProviderConfig::of_kind(ProviderKind::Random)
    });
    let first = harness::run_experiment(&config).unwrap();
    let g = first.manifest.guidance.clone().unwrap();
    assert!(!g.fallback);
    let again = harness::report(&config.output_dir).unwrap();
    assert_eq!(
        again.variants.iter().map(|v| &v.report).collect::<Vec<_>>(),
        first.reports()
    );
}
