//! Cross-policy sharing: export/import consent and the (mrenclave, tag)
//! intersection between an image policy and an application policy.

use std::collections::BTreeSet;

use super::{Combination, ImportKind, PolicyDocument, PolicyError, ServiceSpec, Value};
use crate::fs_shield::VolumeTag;
use crate::tee::Measurement;

pub type Pair = (Measurement, VolumeTag);

fn resolved_pairs(combos: &[Combination]) -> BTreeSet<Pair> {
    combos
        .iter()
        .filter_map(|c| Some((*c.mrenclave.lit()?, *c.fspf_tag.lit()?)))
        .collect()
}

pub fn intersect(exported: &BTreeSet<Pair>, permitted: &BTreeSet<Pair>) -> BTreeSet<Pair> {
    exported.intersection(permitted).copied().collect()
}

/// Pairs a service permits for an imported image: its explicit
/// combinations, or every exported pair whose mrenclave it lists.
pub fn permits(service: &ServiceSpec, exported: &BTreeSet<Pair>) -> BTreeSet<Pair> {
    if service.combinations.is_empty() {
        let mres: BTreeSet<&Measurement> = service.mrenclaves.iter().filter_map(Value::lit).collect();
        exported.iter().filter(|(m, _)| mres.contains(m)).copied().collect()
    } else {
        resolved_pairs(&service.combinations)
    }
}

/// Pairs under which `service` of `app` may run the image it imports from
/// `image_policy`.
pub fn permitted_combinations(
    image_policy: &PolicyDocument,
    app: &PolicyDocument,
    service: &str,
) -> Result<BTreeSet<Pair>, PolicyError> {
    let svc = app
        .service(service)
        .ok_or_else(|| PolicyError::MissingExport(format!("{}: no service {service:?}", app.name)))?;
    let image_name = svc
        .image_name
        .as_deref()
        .ok_or_else(|| PolicyError::MissingExport(format!("service {service:?} names no image")))?;
    let imported = app
        .imports_of(ImportKind::Image)
        .any(|(p, i)| p == image_policy.name && i == image_name);
    if !imported {
        return Err(PolicyError::MissingExport(format!(
            "{} does not import image {image_name:?} from {}",
            app.name, image_policy.name
        )));
    }
    let image = image_policy
        .image(image_name)
        .ok_or_else(|| PolicyError::MissingExport(format!("{} has no image {image_name:?}", image_policy.name)))?;
    if !image.export.contains(&app.name) {
        return Err(PolicyError::ExportNotGranted {
            source_policy: image_policy.name.clone(),
            item: format!("image {image_name}"),
            target: app.name.clone(),
        });
    }
    let exported = resolved_pairs(&image.combinations);
    Ok(intersect(&exported, &permits(svc, &exported)))
}

/// Items `source` shares with `target`, split by whether `target` has
/// consented by importing them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExportBindings {
    pub volumes: BTreeSet<String>,
    pub secrets: BTreeSet<String>,
    pub images: BTreeSet<String>,
    /// Exported to `target` but not imported by it.
    pub pending: BTreeSet<(ImportKind, String)>,
}

impl ExportBindings {
    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty() && self.secrets.is_empty() && self.images.is_empty()
    }
}

/// Fails if `target` imports anything from `source` that `source` does not
/// export to it.
pub fn resolve_exports(source: &PolicyDocument, target: &PolicyDocument) -> Result<ExportBindings, PolicyError> {
    let mut out = ExportBindings::default();
    let exported = |kind: ImportKind, item: &str| -> bool {
        match kind {
            ImportKind::Volume => source.volume(item).is_some_and(|v| v.export.contains(&target.name)),
            ImportKind::Secret => source.secret(item).is_some_and(|s| s.export.contains(&target.name)),
            ImportKind::Image => source.image(item).is_some_and(|i| i.export.contains(&target.name)),
        }
    };
    for imp in target.imports.iter().filter(|i| i.policy == source.name) {
        let Some((kind, item)) = imp.item() else { continue };
        if !exported(kind, item) {
            return Err(PolicyError::ExportNotGranted {
                source_policy: source.name.clone(),
                item: item.to_string(),
                target: target.name.clone(),
            });
        }
        match kind {
            ImportKind::Volume => out.volumes.insert(item.to_string()),
            ImportKind::Secret => out.secrets.insert(item.to_string()),
            ImportKind::Image => out.images.insert(item.to_string()),
        };
    }
    let offered = source
        .volumes
        .iter()
        .filter(|v| v.export.contains(&target.name))
        .map(|v| (ImportKind::Volume, &v.name))
        .chain(
            source
                .secrets
                .iter()
                .filter(|s| s.export.contains(&target.name))
                .map(|s| (ImportKind::Secret, &s.name)),
        )
        .chain(
            source
                .images
                .iter()
                .filter(|i| i.export.contains(&target.name))
                .map(|i| (ImportKind::Image, &i.name)),
        );
    for (kind, name) in offered {
        let taken = match kind {
            ImportKind::Volume => out.volumes.contains(name),
            ImportKind::Secret => out.secrets.contains(name),
            ImportKind::Image => out.images.contains(name),
        };
        if !taken {
            out.pending.insert((kind, name.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;
    use crate::policy::{parse_policy, Command, ImageSpec, ImportSpec, SecretKind, SecretSpec, VolumeSpec, Exports};
    use crate::tee::measure;

    fn tag(i: u8) -> VolumeTag {
        VolumeTag(hash(&[i]))
    }

    fn combo(m: Measurement, t: VolumeTag) -> Combination {
        Combination {
            mrenclave: Value::Lit(m),
            fspf_tag: Value::Lit(t),
        }
    }

    fn image_policy(pairs: &[Pair]) -> PolicyDocument {
        PolicyDocument {
            name: "image_policy".into(),
            services: vec![],
            images: vec![ImageSpec {
                name: "py".into(),
                volumes: vec![],
                fspf_key: None,
                combinations: pairs.iter().map(|(m, t)| combo(*m, *t)).collect(),
                export: Exports(vec!["app_policy".into()]),
            }],
            volumes: vec![],
            secrets: vec![],
            imports: vec![],
            board: None,
        }
    }

    fn app_policy(mres: &[Measurement], pairs: &[Pair]) -> PolicyDocument {
        PolicyDocument {
            name: "app_policy".into(),
            services: vec![ServiceSpec {
                name: "app".into(),
                image_name: Some("py".into()),
                command: Command(vec!["python".into()]),
                environment: Default::default(),
                mrenclaves: mres.iter().map(|m| Value::Lit(*m)).collect(),
                platforms: vec![],
                pwd: None,
                fspf_path: None,
                fspf_key: None,
                fspf_tag: None,
                injection_files: vec![],
                strict: false,
                combinations: pairs.iter().map(|(m, t)| combo(*m, *t)).collect(),
            }],
            images: vec![],
            volumes: vec![],
            secrets: vec![],
            imports: vec![ImportSpec {
                policy: "image_policy".into(),
                secret: None,
                volume: None,
                image: Some("py".into()),
            }],
            board: None,
        }
    }

    #[test]
    fn intersection_of_exports_and_permits() {
        let (m1, m2) = (measure(b"1"), measure(b"2"));
        let img = image_policy(&[(m1, tag(1)), (m2, tag(2))]);
        let app = app_policy(&[m1, m2], &[(m1, tag(1))]);
        assert_eq!(permitted_combinations(&img, &app, "app").unwrap(), [(m1, tag(1))].into());
    }

    #[test]
    fn withdrawn_pair_is_excluded() {
        let (m1, m2) = (measure(b"1"), measure(b"2"));
        let app = app_policy(&[m1, m2], &[]);
        let before = permitted_combinations(&image_policy(&[(m1, tag(1)), (m2, tag(2))]), &app, "app").unwrap();
        assert!(before.contains(&(m1, tag(1))));
        let after = permitted_combinations(&image_policy(&[(m2, tag(2))]), &app, "app").unwrap();
        assert!(!after.contains(&(m1, tag(1))));
        assert_eq!(after, [(m2, tag(2))].into());
    }

    #[test]
    fn disjoint_sets_are_empty() {
        let (m1, m2) = (measure(b"1"), measure(b"2"));
        let img = image_policy(&[(m1, tag(1))]);
        let app = app_policy(&[m2], &[(m2, tag(2))]);
        assert!(permitted_combinations(&img, &app, "app").unwrap().is_empty());
    }

    #[test]
    fn missing_export_is_configuration_error() {
        let m1 = measure(b"1");
        let mut img = image_policy(&[(m1, tag(1))]);
        img.images[0].export = Exports::default();
        let app = app_policy(&[m1], &[]);
        assert!(matches!(
            permitted_combinations(&img, &app, "app"),
            Err(PolicyError::ExportNotGranted { .. })
        ));
        let mut app2 = app.clone();
        app2.imports.clear();
        assert!(matches!(
            permitted_combinations(&image_policy(&[]), &app2, "app"),
            Err(PolicyError::MissingExport(_))
        ));
    }

    fn exporting(name: &str, to: &[&str], imports: &[(&str, &str)]) -> PolicyDocument {
        PolicyDocument {
            name: name.into(),
            services: vec![],
            images: vec![],
            volumes: vec![VolumeSpec {
                name: format!("{name}_vol"),
                fspf_key: None,
                fspf_tag: None,
                export: Exports(to.iter().map(|s| s.to_string()).collect()),
            }],
            secrets: vec![SecretSpec {
                name: format!("{name}_secret"),
                kind: SecretKind::Generated,
                value: None,
                size: Some(16),
                export: Exports(to.iter().map(|s| s.to_string()).collect()),
            }],
            imports: imports
                .iter()
                .map(|(p, v)| ImportSpec {
                    policy: p.to_string(),
                    secret: None,
                    volume: Some(v.to_string()),
                    image: None,
                })
                .collect(),
            board: None,
        }
    }

    #[test]
    fn python_policy_exports_output_volume() {
        let src = parse_policy(crate::policy::tests::PYTHON_POLICY).unwrap();
        let consumer = parse_policy(
            "name: output_policy\nimports:\n  - policy: python_policy\n    volume: encrypted_output_volume\n",
        )
        .unwrap();
        let b = resolve_exports(&src, &consumer).unwrap();
        assert_eq!(b.volumes, ["encrypted_output_volume".to_string()].into());
        let third = parse_policy(
            "name: third_policy\nimports:\n  - policy: python_policy\n    volume: encrypted_output_volume\n",
        )
        .unwrap();
        assert!(matches!(resolve_exports(&src, &third), Err(PolicyError::ExportNotGranted { .. })));
    }

    #[test]
    fn unconsented_exports_are_pending() {
        let a = exporting("a", &["b"], &[]);
        let b = exporting("b", &[], &[]);
        let r = resolve_exports(&a, &b).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.pending.len(), 2);
    }

    /// Every mutual-export graph on up to four policies resolves pairwise
    /// exactly when each import is matched by an export.
    #[test]
    fn export_graphs_resolve_without_recursion() {
        let names = ["a", "b", "c", "d"];
        for n in 2..=4usize {
            let edges: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).collect();
            for mask in 0..(1u32 << edges.len()) {
                let on = |i: usize, j: usize| {
                    let k = edges.iter().position(|e| *e == (i, j)).unwrap();
                    mask & (1 << k) != 0
                };
                let docs: Vec<PolicyDocument> = (0..n)
                    .map(|i| {
                        let to: Vec<&str> = (0..n).filter(|j| *j != i && on(i, *j)).map(|j| names[j]).collect();
                        let vol_names: Vec<String> = (0..n).filter(|j| *j != i).map(|j| format!("{}_vol", names[j])).collect();
                        let imports: Vec<(&str, &str)> = (0..n)
                            .filter(|j| *j != i)
                            .zip(vol_names.iter())
                            .map(|(j, v)| (names[j], v.as_str()))
                            .collect();
                        exporting(names[i], &to, &imports)
                    })
                    .collect();
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            let r = resolve_exports(&docs[i], &docs[j]);
                            assert_eq!(r.is_ok(), on(i, j), "{i}->{j} mask {mask:b}");
                        }
                    }
                }
            }
        }
    }
}
